//! Holds one category out of training, then measures how well a linear SVM
//! on frozen features recognizes it from N example images.
//!
//! `cargo run --release --example nshot -- [held_out_name]`

use macnet::eval::{nshot_eval, NShotConfig};
use macnet::net::{MacNetwork, NetworkConfig};
use macnet::percept::{build_distance_matrix, solve_category_attribute_matrix, SolverConfig};
use macnet::synth::{default_categories, oracle_judgments, CorpusConfig, Dataset};
use macnet::train::{train, TrainConfig};

fn main() -> macnet::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "fur".into());
    let cats = default_categories();
    let idx = cats.iter().position(|c| c.name == name).expect("known category name");
    let data = Dataset::generate(&CorpusConfig {
        train: 100,
        ..Default::default()
    })?;
    let seen = data.without_category(idx)?;
    let d = build_distance_matrix(&oracle_judgments(&cats, 100, 0.1, 0)?)?;
    let a = solve_category_attribute_matrix(&d, 12, &SolverConfig::default())?.matrix.without_row(idx)?;
    let ncfg = NetworkConfig {
        categories: seen.num_categories(),
        ..Default::default()
    };
    let tcfg = TrainConfig {
        batch_size: 56,
        max_epochs: 8,
        ..Default::default()
    };
    let (net, _) = train(MacNetwork::build(&ncfg, 0)?, &seen, Some(&a), &tcfg)?;
    let report = nshot_eval(&net, &cats[idx], &seen.categories, &NShotConfig::default(), 0)?;
    print!("{}", report.to_csv());
    Ok(())
}
