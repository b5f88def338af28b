//! Generates a corpus in memory, discovers attributes from simulated
//! judgments, trains the network and reports held-out metrics.
//!
//! `cargo run --release --example train_patches -- [train_per_category] [max_epochs] [seed]`

use macnet::net::{MacNetwork, NetworkConfig};
use macnet::percept::{build_distance_matrix, solve_category_attribute_matrix, SolverConfig};
use macnet::synth::{default_categories, oracle_judgments, CorpusConfig, Dataset};
use macnet::train::{evaluate, TrainConfig, Trainer};
use std::time::Instant;

fn main() -> macnet::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("integer argument"));
    let per_category = args.next().unwrap_or(400);
    let max_epochs = args.next().unwrap_or(60);
    let seed = args.next().unwrap_or(0) as u64;

    let categories = default_categories();
    let corpus = CorpusConfig {
        categories: categories.clone(),
        train: per_category,
        seed,
        ..Default::default()
    };
    let data = Dataset::generate(&corpus)?;
    let judgments = oracle_judgments(&categories, 100, 0.1, 0)?;
    let distances = build_distance_matrix(&judgments)?;
    let a = solve_category_attribute_matrix(&distances, 12, &SolverConfig::default())?.matrix;

    let net = MacNetwork::build(&NetworkConfig::default(), seed)?;
    let cfg = TrainConfig {
        max_epochs,
        seed,
        ..Default::default()
    };
    let start = Instant::now();
    let (best, _) = Trainer::new(net, &data, Some(&a), &cfg)?.run(|t| {
        let r = t.log().records.last().expect("one record per epoch");
        println!(
            "epoch {:>2}  lr {:.0e}  loss {:.4}  val acc {:.3}  val u {:.3}  val d {:.3}  {:.0}s",
            r.epoch,
            r.learning_rate,
            r.train.total,
            r.val_accuracy,
            r.val_u.unwrap_or(f64::NAN),
            r.val_d.unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    let test = evaluate(&best, &data.test, Some(&a))?;
    println!(
        "test accuracy {:.3}  u {:.3}  d {:.3}",
        test.accuracy,
        test.u.unwrap_or(f64::NAN),
        test.d.unwrap_or(f64::NAN)
    );
    Ok(())
}
