//! HR@k and NDCG@k from ranks, and full-ranking evaluation behind each shield.

use grolab::evalmetrics::{evaluate, hr_ndcg};
use grolab::grodefense::{pretrain_until_plateau, PretrainConfig};
use grolab::recmodels::{Architecture, SequenceModel};
use grolab::seqdata::{leave_one_out_split, synth_generate};
use grolab::shield::{DefenseMode, Shield};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ranks = [Some(1), Some(3), None, Some(12)];
    for k in [1, 5, 10, 20] {
        let (hr, ndcg) = hr_ndcg(&ranks, k)?;
        println!("ranks {ranks:?}  HR@{k} {hr:.3}  NDCG@{k} {ndcg:.3}");
    }

    let split = leave_one_out_split(&synth_generate(300, 120, 15, 1, 7)?)?;
    let mut model = SequenceModel::init(Architecture::AttnLite, split.num_items, 16, 15, 1)?;
    pretrain_until_plateau(&mut model, &split, &PretrainConfig::default())?;
    for mode in [DefenseMode::None, DefenseMode::Random { seed: 1 }, DefenseMode::Reverse] {
        let report = evaluate(&model, &split.test_examples(), &mut Shield::new(mode), 20, &[1, 5, 10, 20], mode.tag())?;
        println!("{}", report.to_json());
    }
    Ok(())
}
