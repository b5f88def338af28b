//! Writes a small corpus to disk and prints its trait table.
//!
//! `cargo run --release --example synth_corpus -- [out_dir]`

use macnet::synth::{gen_corpus, CorpusConfig, TRAIT_NAMES};
use std::path::PathBuf;

fn main() -> macnet::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("macnet-corpus"), PathBuf::from);
    let cfg = CorpusConfig {
        train: 20,
        val: 5,
        test: 5,
        ..Default::default()
    };
    let m = gen_corpus(&cfg, &out)?;
    println!("{} patches under {}", m.len(), out.display());
    println!("{:<10} {}", "category", TRAIT_NAMES.join(" "));
    for (c, row) in m.categories.iter().zip(&m.traits.rows) {
        let bits: Vec<String> = row.iter().zip(TRAIT_NAMES).map(|(b, n)| format!("{:>w$}", *b as u8, w = n.len())).collect();
        println!("{:<10} {}", c.name, bits.join(" "));
    }
    Ok(())
}
