//! Evaluates a token-selective run with frozen thresholds, dumps its gate
//! masks and recounts sparsity from the dump. Takes an optional config path
//! (defaults to the smoke config).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use tspeft::trainer::{evaluate, finetune, finetune_data, load_or_pretrain, FinetuneOptions, RunConfig};

fn main() -> tspeft::Result<()> {
    let path = std::env::args().nth(1).map_or_else(
        || Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.json"),
        PathBuf::from,
    );
    let cfg = RunConfig::load(&path)?;
    let (weights, _) = load_or_pretrain(&cfg)?;
    let (train, val) = finetune_data(&cfg)?;
    let run = finetune(&cfg, &weights, &train, &val, &FinetuneOptions::default())?;

    let mut dump = String::new();
    let report = evaluate(&run.checkpoint, &val, Some(&mut dump))?;

    // Recount from the text rows: `eval example module bits`.
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for line in dump.lines() {
        let mut f = line.split_whitespace();
        let (_, _, module, bits) = (f.next(), f.next(), f.next().unwrap_or(""), f.next().unwrap_or(""));
        let c = counts.entry(module).or_default();
        c.0 += bits.chars().filter(|&b| b == '1').count();
        c.1 += bits.chars().filter(|&b| b != '-').count();
    }
    println!("accuracy {:.4}", report.accuracy);
    for m in &report.modules {
        let (on, valid) = counts[m.id.as_str()];
        println!(
            "{:<18} tau {:.5}  sparsity {:.4}  recounted {:.4}",
            m.id,
            m.tau,
            m.sparsity,
            1.0 - on as f64 / valid as f64
        );
    }
    Ok(())
}
