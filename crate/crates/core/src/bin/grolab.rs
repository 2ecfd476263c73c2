use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use grolab::evalmetrics::evaluate;
use grolab::harness::{
    pretrain_target, prepare_data, protect_target, run_attack, run_experiment, sweep, DefenseKind, ExperimentConfig,
    HarnessError, SweepAxis,
};
use grolab::recmodels::SequenceModel;
use grolab::seqdata::{dataset_stats, write_tsv_sequences};
use grolab::shield::Shield;

#[derive(Parser)]
#[command(name = "grolab", version, about = "Ranking-perturbation defense against model extraction")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated defenses for `run`, a single defense elsewhere.
    #[arg(long, global = true, value_delimiter = ',')]
    defense: Vec<DefenseKind>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    n_queries: Option<usize>,
    #[arg(long, global = true)]
    k_response: Option<usize>,
}

#[derive(Subcommand)]
enum Verb {
    /// Load a ratings or sequence file, write it back as TSV sequences with stats.
    Ingest,
    /// Generate the synthetic corpus.
    Synth,
    /// Pretrain the target recommender.
    Train,
    /// Fine-tune a pretrained target with GRO.
    Defend {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Query a deployed checkpoint through its shield and fit a surrogate.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// HR@k and NDCG@k of a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Full pipeline for every configured defense.
    Run,
    /// Repeat `run` over values of one axis.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if !self.defense.is_empty() {
            cfg.defenses = self.defense.clone();
        }
        if let Some(l) = self.lambda {
            cfg.gro.lambda = l;
        }
        if let Some(n) = self.n_queries {
            cfg.attack.n_queries = n;
        }
        if let Some(k) = self.k_response {
            cfg.attack.k_response = k;
        }
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    fn single_defense(&self) -> Result<DefenseKind, HarnessError> {
        match self.defense.as_slice() {
            [] => Ok(DefenseKind::None),
            [d] => Ok(*d),
            _ => Err(HarnessError::Config("this verb takes a single --defense".into())),
        }
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path, HarnessError> {
    fs::create_dir_all(&cfg.out_dir).map_err(|source| HarnessError::Io {
        path: cfg.out_dir.clone(),
        source,
    })?;
    Ok(&cfg.out_dir)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn stage<T, E: std::fmt::Display>(name: &str, r: Result<T, E>) -> Result<T, HarnessError> {
    r.map_err(|e| HarnessError::Stage {
        stage: name.into(),
        message: e.to_string(),
    })
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    let cfg = cli.common.config()?;
    match cli.verb {
        Verb::Ingest | Verb::Synth => {
            let mut data = cfg.data.clone();
            if matches!(cli.verb, Verb::Synth) {
                data.source = grolab::harness::DataSource::Synth;
            }
            let ds = stage("data", data.load())?;
            let out = out_dir(&cfg)?;
            stage("data", write_tsv_sequences(&ds, out.join("sequences.tsv")))?;
            let stats = dataset_stats(&ds);
            write_json(&out.join("stats.json"), &stats)?;
            println!(
                "{} users, {} items, avg length {:.2}, density {:.4}",
                stats.num_users, stats.num_items, stats.avg_length, stats.density
            );
        }
        Verb::Train => {
            let split = prepare_data(&cfg)?;
            let (model, report) = pretrain_target(&cfg, &split)?;
            let out = out_dir(&cfg)?;
            stage("pretrain", model.save(out.join("target.ckpt")))?;
            write_json(&out.join("pretrain.json"), &report)?;
            println!("best val HR@10 {:.4} at epoch {}", report.best_val_hr, report.best_epoch);
        }
        Verb::Defend { checkpoint } => {
            let split = prepare_data(&cfg)?;
            let target = match checkpoint {
                Some(p) => stage("load", SequenceModel::load(p))?,
                None => pretrain_target(&cfg, &split)?.0,
            };
            let outcome = protect_target(&cfg, &target, &split)?;
            let out = out_dir(&cfg)?;
            stage("gro", outcome.target.save(out.join("target-gro.ckpt")))?;
            stage("gro", grolab::grodefense::write_curve_csv(&outcome.curve, out.join("gro-curve.csv")))?;
            println!(
                "{} GRO steps, {} of {} rows with nonpositive gradient",
                outcome.curve.len(),
                outcome.nonpositive_rows,
                outcome.rows
            );
        }
        Verb::Attack { checkpoint } => {
            let defense = cli.common.single_defense()?;
            let deployed = Arc::new(stage("load", SequenceModel::load(checkpoint))?);
            let (log, surrogate, calls) = run_attack(&cfg, deployed, cfg.shield_mode(defense))?;
            let out = out_dir(&cfg)?;
            stage("queries", log.save(out.join(format!("queries-{defense}.jsonl"))))?;
            stage("surrogate", surrogate.save(out.join(format!("surrogate-{defense}.ckpt"))))?;
            println!("{} queries, {calls} oracle calls", log.records.len());
        }
        Verb::Evaluate { checkpoint } => {
            let defense = cli.common.single_defense()?;
            let split = prepare_data(&cfg)?;
            let model = stage("load", SequenceModel::load(checkpoint))?;
            let mut shield = Shield::new(cfg.shield_mode(defense));
            let report = stage(
                "evaluate",
                evaluate(&model, &split.test_examples(), &mut shield, cfg.k_eval(), &cfg.ks, defense.tag()),
            )?;
            let out = out_dir(&cfg)?;
            write_json(&out.join(format!("metrics-{defense}.json")), &report)?;
            for (k, m) in &report.metrics {
                println!("HR@{k} {:.4}  NDCG@{k} {:.4}", m.hr, m.ndcg);
            }
        }
        Verb::Run => {
            let art = run_experiment(&cfg)?;
            for r in &art.summary {
                println!("{:<8} {:<10} k={:<3} hr={:.4} ndcg={:.4}", r.defense, r.model, r.k, r.hr, r.ndcg);
            }
        }
        Verb::Sweep { axis, values } => {
            let outcome = sweep(&cfg, axis, &values)?;
            for (value, result) in &outcome.runs {
                match result {
                    Ok(_) => println!("{axis}={value}: ok"),
                    Err(e) => println!("{axis}={value}: failed at {}: {e}", e.stage()),
                }
            }
            println!("merged results in {}", outcome.merged.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.stage());
            ExitCode::FAILURE
        }
    }
}
