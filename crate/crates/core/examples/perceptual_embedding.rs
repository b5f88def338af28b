//! Simulated similarity judgments -> perceptual distances -> a
//! category-attribute matrix whose row distances reproduce them.
//!
//! `cargo run --release --example perceptual_embedding -- [attributes]`

use macnet::percept::{build_distance_matrix, solve_category_attribute_matrix, PerceptualDistanceMatrix, SolverConfig};
use macnet::synth::{default_categories, oracle_judgments};

fn main() -> macnet::Result<()> {
    let m: usize = std::env::args().nth(1).map_or(12, |a| a.parse().expect("attribute count"));
    let cats = default_categories();
    let judgments = oracle_judgments(&cats, 100, 0.1, 0)?;
    let d = build_distance_matrix(&judgments)?;
    let r = solve_category_attribute_matrix(&d, m, &SolverConfig::default())?;
    println!("objective {:.3e}  stress {:.3e}  rmse {:.4}  (restart {})", r.objective, r.stress, r.rmse, r.restart);
    let fitted = PerceptualDistanceMatrix::from_embedding(&r.matrix)?;
    for (k, c) in cats.iter().enumerate() {
        let row: Vec<String> = r.matrix.row(k).iter().map(|v| format!("{v:.2}")).collect();
        println!("{:<10} {}", c.name, row.join(" "));
    }
    println!("distance to oak: target vs embedded");
    for (k, c) in cats.iter().enumerate().skip(1) {
        println!("  {:<10} {:.3} {:.3}", c.name, d.get(0, k), fitted.get(0, k));
    }
    Ok(())
}
