//! Generates the base and shifted tasks, prints a few examples and checks
//! the text export round trip.

use tspeft::tasks::{gen_shifted_task, gen_sparse_signal_task, Dataset, ShiftRule, TaskParams};

fn main() -> tspeft::Result<()> {
    let params = TaskParams {
        min_len: Some(24),
        ..TaskParams::default()
    };
    let base = gen_sparse_signal_task(1, 1000, &params)?;
    println!("label histogram {:?}", base.label_histogram());
    for ex in &base.examples[..3] {
        println!(
            "label {} signal at {:?}: {:?}",
            ex.label, ex.signal_positions, ex.tokens
        );
    }
    let permuted = gen_shifted_task(&base, 2, &ShiftRule::PermuteClasses { perm: vec![1, 2, 3, 0] })?;
    let moved = gen_shifted_task(&base, 2, &ShiftRule::MoveSignal)?;
    println!(
        "permuted labels {:?}",
        permuted.examples[..8].iter().map(|e| e.label).collect::<Vec<_>>()
    );
    println!("moved signal positions {:?}", moved.examples[0].signal_positions);

    let text = base.to_text();
    let back = Dataset::from_text(&text, base.vocab_size, base.num_classes)?;
    println!("text export: {} bytes, round trip exact: {}", text.len(), back == base);
    Ok(())
}
