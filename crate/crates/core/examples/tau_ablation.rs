//! Same fine-tune with Adam-style and plain-SGD threshold updates; prints
//! the late-training spread of every module's threshold. Takes an optional
//! config path (defaults to the smoke config).

use std::path::{Path, PathBuf};

use tspeft::trainer::{finetune, finetune_data, load_or_pretrain, FinetuneOptions, RunConfig, TauOptimizer};

fn main() -> tspeft::Result<()> {
    let path = std::env::args().nth(1).map_or_else(
        || Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.json"),
        PathBuf::from,
    );
    let cfg = RunConfig::load(&path)?;
    let (weights, _) = load_or_pretrain(&cfg)?;
    let (train, val) = finetune_data(&cfg)?;
    let mut runs = Vec::new();
    for opt in [TauOptimizer::Adam, TauOptimizer::PlainSgd] {
        let mut c = cfg.clone();
        c.ablation.tau_optimizer = opt;
        runs.push(finetune(&c, &weights, &train, &val, &FinetuneOptions::default())?);
    }
    println!("{:<18} {:>12} {:>12}", "module", "adam std", "sgd std");
    for (a, s) in runs[0].summary.modules.iter().zip(&runs[1].summary.modules) {
        println!(
            "{:<18} {:>12.3e} {:>12.3e}",
            a.id, a.tau_std_last_half, s.tau_std_last_half
        );
    }
    println!(
        "val accuracy: adam {:.4}, plain sgd {:.4}",
        runs[0].summary.val_accuracy, runs[1].summary.val_accuracy
    );
    Ok(())
}
