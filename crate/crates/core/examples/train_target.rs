//! Pretrains an attn-lite target until validation HR@10 plateaus.

use grolab::evalmetrics::hit_rate;
use grolab::grodefense::{convergence_floor, pretrain_until_plateau, PretrainConfig};
use grolab::recmodels::{Architecture, SequenceModel};
use grolab::seqdata::{leave_one_out_split, synth_generate};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let split = leave_one_out_split(&synth_generate(500, 200, 20, 1, 7)?)?;
    let mut target = SequenceModel::init(Architecture::AttnLite, split.num_items, 32, 20, 1)?;
    let report = pretrain_until_plateau(&mut target, &split, &PretrainConfig::default())?;
    for (epoch, (loss, hr)) in report.train_loss.iter().zip(&report.val_hr).enumerate() {
        println!("epoch {:>2}  train loss {loss:.4}  val HR@10 {hr:.4}", epoch + 1);
    }
    println!(
        "best epoch {}  floor {:.3}  test HR@10 {:.4}",
        report.best_epoch,
        convergence_floor(split.num_items),
        hit_rate(&target, &split.test_examples(), 10)?
    );
    let first = &split.test_examples()[0];
    println!("top 5 after {:?}: {:?}", first.prefix, target.recommend(&first.prefix, 5)?.items());
    Ok(())
}
