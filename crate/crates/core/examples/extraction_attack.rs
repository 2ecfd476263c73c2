//! Black-box extraction of an undefended target: autoregressive queries,
//! then a surrogate fitted to the returned rankings.

use std::sync::Arc;

use grolab::evalmetrics::hit_rate;
use grolab::extraction::{generate_queries, overlap, train_surrogate, AttackConfig, OracleHandle};
use grolab::grodefense::{pretrain_until_plateau, PretrainConfig};
use grolab::recmodels::{topk, Architecture, SequenceModel};
use grolab::seqdata::{leave_one_out_split, synth_generate};
use grolab::shield::DefenseMode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let split = leave_one_out_split(&synth_generate(500, 200, 20, 1, 7)?)?;
    let mut target = SequenceModel::init(Architecture::AttnLite, split.num_items, 32, 20, 1)?;
    pretrain_until_plateau(&mut target, &split, &PretrainConfig::default())?;
    let target = Arc::new(target);

    let cfg = AttackConfig {
        n_queries: 1000,
        k_response: 50,
        epochs: 20,
        seed: 11,
        ..AttackConfig::default()
    };
    let mut oracle = OracleHandle::new(target.clone(), DefenseMode::None, cfg.k_response);
    let log = generate_queries(&mut oracle, &cfg)?;
    println!("{} sequences, {} oracle calls", log.records.len(), oracle.calls());

    let surrogate = train_surrogate(&log, Architecture::AttnLite, split.num_items, &cfg)?;
    let test = split.test_examples();
    let mut shared = 0;
    for ex in &test {
        let a = topk(&target.score_next(&ex.prefix)?, 10, &ex.prefix)?;
        let b = topk(&surrogate.score_next(&ex.prefix)?, 10, &ex.prefix)?;
        shared += overlap(&a, &b);
    }
    println!(
        "HR@10 target {:.3}  surrogate {:.3}  mean top-10 overlap {:.2}",
        hit_rate(&target, &test, 10)?,
        hit_rate(&surrogate, &test, 10)?,
        shared as f64 / test.len() as f64
    );
    Ok(())
}
