//! Finite-difference verification of PEFT gradients, token influences and
//! the threshold gradient on the shipped small config.

use std::path::Path;

use tspeft::trainer::{gradcheck, GradCheckSettings, RunConfig};

fn main() -> tspeft::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/gradcheck_small.json");
    let cfg = RunConfig::load(&path)?;
    let report = gradcheck(&cfg, &GradCheckSettings::default())?;
    for c in &report.cases {
        println!(
            "{:<8} seed {}  max param err {:.2e}  max mu err {:.2e}  g exact {}  gates on {:.2}",
            c.variant.name(),
            c.seed,
            c.max_param_rel_err,
            c.max_mu_rel_err,
            c.g_k_exact,
            c.gate_on_fraction
        );
    }
    println!("passed: {}", report.passed);
    Ok(())
}
