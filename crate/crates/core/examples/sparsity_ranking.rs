//! Ranks modules by learned token sparsity after a token-selective run and
//! retrains only the lowest- and highest-sparsity halves. Takes an optional
//! config path (defaults to the smoke config).

use std::path::{Path, PathBuf};

use tspeft::analysis::{module_sparsity_table, rank_modules, select_and_retrain, SelectionKind, SelectionStrategy};
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
    print!("{}", table.to_csv());

    for kind in [
        SelectionKind::SLow,
        SelectionKind::SHigh,
        SelectionKind::NormRelative,
        SelectionKind::HalfRank,
    ] {
        let percent = if kind == SelectionKind::HalfRank { 1.0 } else { 0.5 };
        let ranking = rank_modules(&table, &SelectionStrategy::new(kind, percent))?;
        let run = select_and_retrain(&weights, &train, &val, &cfg, &ranking)?;
        let ids: Vec<String> = ranking.selected.iter().map(|p| p.id()).collect();
        println!(
            "{:<14} val accuracy {:.4}  params {:>6}  modules {}",
            kind.name(),
            run.summary.val_accuracy,
            run.summary.trainable_params,
            ids.len()
        );
    }
    Ok(())
}
