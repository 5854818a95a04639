//! Retrains on growing lowest-sparsity-first module subsets and prints the
//! sweep table as CSV. Takes an optional config path (defaults to the smoke
//! config).

use std::path::{Path, PathBuf};

use tspeft::analysis::{module_sparsity_table, sweep_csv, sweep_percentages};
use tspeft::trainer::{finetune, finetune_data, load_or_pretrain, FinetuneOptions, RunConfig};

fn main() -> tspeft::Result<()> {
    let path = std::env::args().nth(1).map_or_else(
        || Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.json"),
        PathBuf::from,
    );
    let cfg = RunConfig::load(&path)?;
    let (weights, _) = load_or_pretrain(&cfg)?;
    let (train, val) = finetune_data(&cfg)?;
    let ts = finetune(&cfg, &weights, &train, &val, &FinetuneOptions::default())?;
    let table = module_sparsity_table(&ts.checkpoint, &val)?;
    let rows = sweep_percentages(&weights, &train, &val, &cfg, &table, &cfg.analysis.percents)?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}
