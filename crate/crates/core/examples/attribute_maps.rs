//! Trains a quick model, then maps attributes over a two-material composite
//! and writes heatmaps. Pass a checkpoint to skip training.
//!
//! `cargo run --release --example attribute_maps -- [out_dir] [checkpoint]`

use macnet::eval::spatial_consistency;
use macnet::net::{load_checkpoint, predict_map, MacNetwork, MapTarget, NetworkConfig};
use macnet::percept::{build_distance_matrix, solve_category_attribute_matrix, SolverConfig};
use macnet::synth::{default_categories, oracle_judgments, two_region_composite, CorpusConfig, Dataset};
use macnet::train::{train, TrainConfig};
use macnet::io;
use std::path::PathBuf;

fn main() -> macnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map_or_else(|| std::env::temp_dir().join("macnet-maps"), PathBuf::from);
    let cats = default_categories();
    let net = match args.next() {
        Some(p) => load_checkpoint(&PathBuf::from(p))?.network,
        None => {
            let data = Dataset::generate(&CorpusConfig {
                train: 100,
                ..Default::default()
            })?;
            let d = build_distance_matrix(&oracle_judgments(&cats, 100, 0.1, 0)?)?;
            let a = solve_category_attribute_matrix(&d, 12, &SolverConfig::default())?.matrix;
            let cfg = TrainConfig {
                max_epochs: 8,
                ..Default::default()
            };
            train(MacNetwork::build(&NetworkConfig::default(), 0)?, &data, Some(&a), &cfg)?.0
        }
    };
    io::create_dir(&out)?;
    let (img, mask) = two_region_composite(&cats[0], &cats[4], 7, 128, 128);
    io::write_rgb_png(&out.join("composite.png"), &img)?;
    let maps = predict_map(&net, &img, net.config().patch_size, MapTarget::Attributes)?;
    for c in 0..maps.channels {
        io::write_heatmap_png(&out.join(format!("attribute_{c:02}.png")), maps.channel(c), 128, 128)?;
        let tv = spatial_consistency(maps.channel(c), 128, 128, &mask)?;
        println!("attribute {c:>2}: within TV {:.4}  cross TV {:.4}", tv.within, tv.cross);
    }
    println!("heatmaps in {}", out.display());
    Ok(())
}
