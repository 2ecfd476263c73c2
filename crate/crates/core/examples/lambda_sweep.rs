//! Sweeps the swap-loss weight on a reduced corpus and prints the merged table.

use grolab::harness::{sweep, DefenseKind, ExperimentConfig, SweepAxis};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig {
        defenses: vec![DefenseKind::Gro],
        out_dir: std::env::temp_dir().join("grolab-lambda-sweep"),
        ..ExperimentConfig::default()
    };
    cfg.data.users = 200;
    cfg.data.items = 100;
    cfg.attack.n_queries = 500;
    cfg.attack.k_response = 50;
    cfg.attack.epochs = 10;
    cfg.gro.k = 50;
    cfg.gro.epochs = 2;

    let outcome = sweep(&cfg, SweepAxis::Lambda, &[0.001, 0.01, 0.1, 1.0])?;
    for (lambda, result) in &outcome.runs {
        match result {
            Ok(art) => println!(
                "lambda {lambda:<6} target HR@10 {:.3}  surrogate HR@10 {:.3}",
                art.hr(DefenseKind::Gro, "target", 10).unwrap_or(f64::NAN),
                art.hr(DefenseKind::Gro, "surrogate", 10).unwrap_or(f64::NAN)
            ),
            Err(e) => println!("lambda {lambda:<6} failed at {}: {e}", e.stage()),
        }
    }
    let rows = std::fs::read_to_string(&outcome.merged)?.lines().count() - 1;
    println!("{rows} rows in {}", outcome.merged.display());
    Ok(())
}
