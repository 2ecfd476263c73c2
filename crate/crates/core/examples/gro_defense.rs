//! GRO mechanics on one ranking, then fine-tuning a pretrained target.

use grolab::evalmetrics::hit_rate;
use grolab::grodefense::{
    build_proposal, grad_wrt_swap, pretrain_until_plateau, student_loss_on_swap, swap_loss_value, topk_to_swap_matrix,
    train_with_gro, GroConfig, PretrainConfig,
};
use grolab::ndiff::{Graph, Tensor};
use grolab::recmodels::{Architecture, SequenceModel};
use grolab::seqdata::{leave_one_out_split, synth_generate};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // target returned items 3, 1, 4 out of 6; student scores below
    let a = topk_to_swap_matrix(&[3, 1, 4], 6)?;
    let student = vec![0.2, 0.9, 0.4, 0.1, 0.7, 0.3];
    let mut g = Graph::new();
    let s = g.leaf(Tensor::column(student));
    let (loss, leaf) = student_loss_on_swap(&mut g, &a, s, &[2, 5, 6], 0.1, 0.1)?;
    let grad = grad_wrt_swap(&mut g, leaf, loss)?;
    let proposal = build_proposal(&grad);
    println!("student loss {:.3}", g.value(loss).item());
    println!("A  {:?}", a.items());
    println!("A' {:?}", proposal.items());
    let target_scores = [0.5, 0.1, 0.9, 0.3, 0.2, 0.0];
    println!("swap loss on target scores {:.3}", swap_loss_value(&a, &proposal, &target_scores, 0.1)?);

    let split = leave_one_out_split(&synth_generate(500, 200, 20, 1, 7)?)?;
    let mut target = SequenceModel::init(Architecture::AttnLite, split.num_items, 32, 20, 1)?;
    pretrain_until_plateau(&mut target, &split, &PretrainConfig::default())?;
    let cfg = GroConfig {
        epochs: 2,
        ..GroConfig::default()
    };
    let outcome = train_with_gro(&target, &split, &cfg)?;
    for p in outcome.curve.iter().step_by(50) {
        println!("step {:>4}  L_target {:.3}  L_student {:.3}  L_swap {:.3}", p.step, p.l_target, p.l_student, p.l_swap);
    }
    let test = split.test_examples();
    println!(
        "test HR@10 before {:.3}  after {:.3}",
        hit_rate(&target, &test, 10)?,
        hit_rate(&outcome.target, &test, 10)?
    );
    Ok(())
}
