//! Token-selective LoRA fine-tuning on the shifted task, compared against
//! the frozen backbone. Takes an optional config path.

use std::path::Path;

use tspeft::trainer::{backbone_accuracy, finetune, finetune_data, load_or_pretrain, FinetuneOptions, RunConfig};

fn main() -> tspeft::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(Path::new(&path))?,
        None => RunConfig::default(),
    };
    let (weights, report) = load_or_pretrain(&cfg)?;
    if let Some(r) = report {
        println!("pretrained backbone: val accuracy {:.4}", r.val_accuracy);
    }
    let (train, val) = finetune_data(&cfg)?;
    println!(
        "frozen backbone on the shifted task: {:.4}",
        backbone_accuracy(&weights, &val)?
    );
    let start = std::time::Instant::now();
    let run = finetune(&cfg, &weights, &train, &val, &FinetuneOptions::default())?;
    let s = &run.summary;
    println!(
        "{} steps in {:.1?}: val accuracy {:.4}, mean sparsity {:.3}, {} trainable parameters",
        s.steps,
        start.elapsed(),
        s.val_accuracy,
        s.mean_sparsity,
        s.trainable_params
    );
    for m in &s.modules {
        println!(
            "  {:<18} sparsity {:.3}  tau {:.5}  mean r {:.5}  tau std (last half) {:.2e}",
            m.id, m.sparsity, m.tau_final, m.mean_r, m.tau_std_last_half
        );
    }
    Ok(())
}
