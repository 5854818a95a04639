//! Pretrains the frozen backbone on the base task and reports validation
//! accuracy. Usage: `pretrain_backbone [config.json [backbone_out.json]]`.

use tspeft::checkpoint::Checkpoint;
use tspeft::tasks::gen_sparse_signal_task;
use tspeft::trainer::{pretrain, RunConfig};

fn main() -> tspeft::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(std::path::Path::new(&path))?,
        None => RunConfig::default(),
    };
    let t = &cfg.task;
    let base = gen_sparse_signal_task(t.pretrain_seed, t.n_train + t.n_val, &t.params())?;
    let (train, val) = base.split(t.n_val)?;
    let start = std::time::Instant::now();
    let (weights, report) = pretrain(&cfg, &train, &val)?;
    for (i, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {} loss {l:.4}", i + 1);
    }
    println!(
        "val accuracy {:.4} after {} steps ({:.1?})",
        report.val_accuracy,
        report.steps,
        start.elapsed()
    );
    println!("digest {}", weights.digest());
    if let Some(out) = std::env::args().nth(2) {
        Checkpoint::backbone_only(weights)?.save(std::path::Path::new(&out))?;
    }
    Ok(())
}
