//! The complete experiment for every defense, driven by a TOML config.
//!
//! `cargo run --release --example full_pipeline -- configs/pinned.toml`

use grolab::harness::{run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let art = run_experiment(&cfg)?;
    println!("{:<8} {:<10} {:>3} {:>7} {:>7}", "defense", "model", "k", "HR", "NDCG");
    for r in &art.summary {
        println!("{:<8} {:<10} {:>3} {:>7.4} {:>7.4}", r.defense, r.model, r.k, r.hr, r.ndcg);
    }
    println!("artifacts in {} (config {})", art.out_dir.display(), &art.manifest.config_hash[..12]);
    Ok(())
}
