//! Generates the synthetic corpus, prints its statistics and the split sizes.

use grolab::seqdata::{dataset_stats, leave_one_out_split, synth_generate, write_tsv_sequences};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = synth_generate(500, 200, 20, 1, 7)?;
    let stats = dataset_stats(&ds);
    println!(
        "users {}  items {}  avg length {:.2}  density {:.4}",
        stats.num_users, stats.num_items, stats.avg_length, stats.density
    );
    let split = leave_one_out_split(&ds)?;
    println!(
        "train positions {}  validation {}  test {}",
        split.training_examples(20).len(),
        split.validation_examples().len(),
        split.test_examples().len()
    );
    println!("user 1: {:?}", ds.sequence(1));

    let path = std::env::temp_dir().join("grolab-synth.tsv");
    write_tsv_sequences(&ds, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
