//! Fits boolean expressions over binarized attributes to each semantic
//! trait. Pass a checkpoint trained on the default corpus to skip training.
//!
//! `cargo run --release --example trait_decoding -- [checkpoint]`

use macnet::eval::{decode_traits, AnnealConfig};
use macnet::net::{load_checkpoint, MacNetwork, NetworkConfig};
use macnet::percept::{build_distance_matrix, solve_category_attribute_matrix, SolverConfig};
use macnet::synth::{default_categories, oracle_judgments, CorpusConfig, Dataset};
use macnet::train::{train, TrainConfig};
use std::path::PathBuf;

fn main() -> macnet::Result<()> {
    let data = Dataset::generate(&CorpusConfig {
        train: 100,
        ..Default::default()
    })?;
    let net = match std::env::args().nth(1) {
        Some(p) => load_checkpoint(&PathBuf::from(p))?.network,
        None => {
            let d = build_distance_matrix(&oracle_judgments(&default_categories(), 100, 0.1, 0)?)?;
            let a = solve_category_attribute_matrix(&d, 12, &SolverConfig::default())?.matrix;
            let cfg = TrainConfig {
                max_epochs: 8,
                ..Default::default()
            };
            train(MacNetwork::build(&NetworkConfig::default(), 0)?, &data, Some(&a), &cfg)?.0
        }
    };
    let rep = decode_traits(&net, &data.train, &data.test, &AnnealConfig::default(), 0)?;
    for t in &rep.traits {
        match &t.tree {
            Some(tree) => println!("{:<9} test {:.3}  train {:.3}  {tree}", t.name, t.test_accuracy, t.train_accuracy),
            None => println!("{:<9} constant, skipped", t.name),
        }
    }
    println!("mean held-out accuracy {:.3}", rep.mean_test_accuracy);
    Ok(())
}
