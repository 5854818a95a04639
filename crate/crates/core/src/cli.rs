//! Command-line front end.
//!
//! Exit status: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! config. Failures print one JSON line `{"error": {"kind", "message"}}` on
//! stderr; progress also goes to stderr, artifacts only to `--out`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{module_sparsity_table, rank_modules, sweep_csv, sweep_percentages, SparsityTable};
use crate::backbone::BackboneWeights;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::trainer::{
    evaluate, finetune, finetune_data, gradcheck, load_or_pretrain, pretrain, pretrain_data, FinetuneOptions,
    FinetuneRun, GradCheckSettings, RunConfig, TauOptimizer,
};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "tspeft", version, about = "Token-selective PEFT laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for every artifact.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Also write every gate mask as text rows.
    #[arg(long, global = true)]
    pub dump_masks: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train the backbone on the base task.
    Pretrain,
    /// Token-selective fine-tune on the shifted task.
    Finetune,
    /// Score `paths.checkpoint` on the validation split.
    Evaluate,
    /// Finite-difference checks on a small config.
    Gradcheck,
    /// Adam-style vs plain-SGD threshold updates on the same config.
    AblateTau,
    /// Per-module sparsity of a token-selective run.
    SparsityTable,
    /// Order modules by `analysis.strategy` and report the selection.
    RankModules,
    /// Lowest-sparsity-first retrains over `analysis.percents`.
    Sweep,
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: ErrorBody<'a>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
}

fn report(kind: &str, message: String) {
    let line = ErrorLine {
        error: ErrorBody { kind, message },
    };
    eprintln!("{}", serde_json::to_string(&line).expect("error line serializes"));
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            report("usage", e.kind().to_string());
            return EXIT_USAGE;
        }
    };
    let cfg = match resolve_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            report(e.kind(), e.to_string());
            return EXIT_CONFIG;
        }
    };
    match execute(&cli, &cfg) {
        Ok(()) => 0,
        Err(e) => {
            report(e.kind(), e.to_string());
            EXIT_RUNTIME
        }
    }
}

/// Loads, overrides and validates the config, and checks the inputs the
/// command needs, before any compute.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    if !path.is_file() {
        return Err(Error::Config(format!("config file {} does not exist", path.display())));
    }
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    for p in [&cfg.paths.backbone, &cfg.paths.checkpoint].into_iter().flatten() {
        if !p.is_file() {
            return Err(Error::Config(format!("input file {} does not exist", p.display())));
        }
    }
    if cli.command == Command::Evaluate && cfg.paths.checkpoint.is_none() {
        return Err(Error::Config("evaluate needs paths.checkpoint".into()));
    }
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("artifact serializes");
    s.push('\n');
    s
}

fn execute(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let out = &cli.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(out, "resolved_config.json", &(cfg.to_json() + "\n"))?;
    match cli.command {
        Command::Pretrain => {
            let (train, val) = pretrain_data(cfg)?;
            eprintln!("pretraining on {} examples", train.len());
            let (weights, report) = pretrain(cfg, &train, &val)?;
            eprintln!("validation accuracy {:.4}", report.val_accuracy);
            Checkpoint::backbone_only(weights)?.save(&out.join("backbone.json"))?;
            write(out, "pretrain_report.json", &json(&report))?;
        }
        Command::Finetune => {
            let weights = backbone(cfg, out)?;
            let run = run_finetune(cfg, &weights, cli.dump_masks)?;
            write_run(out, "", &run)?;
        }
        Command::Evaluate => {
            let path = cfg.paths.checkpoint.as_ref().expect("checked during resolution");
            let ck = Checkpoint::load(path)?;
            let (_, val) = finetune_data(cfg)?;
            let mut masks = cli.dump_masks.then(String::new);
            let report = evaluate(&ck, &val, masks.as_mut())?;
            eprintln!(
                "accuracy {:.4}, mean sparsity {:.4}",
                report.accuracy, report.mean_sparsity
            );
            write(out, "eval.json", &json(&report))?;
            if let Some(m) = masks {
                write(out, "masks.txt", &m)?;
            }
        }
        Command::Gradcheck => {
            let report = gradcheck(cfg, &GradCheckSettings::default())?;
            write(out, "gradcheck.json", &json(&report))?;
            eprintln!(
                "max parameter error {:.3e}, max influence error {:.3e}, threshold gradient exact: {}",
                report.max_param_rel_err, report.max_mu_rel_err, report.g_k_exact
            );
            if !report.passed {
                return Err(Error::GradCheck(report.failures.join("; ")));
            }
        }
        Command::AblateTau => {
            let weights = backbone(cfg, out)?;
            let mut runs = Vec::new();
            for (tag, opt) in [("adam", TauOptimizer::Adam), ("plain_sgd", TauOptimizer::PlainSgd)] {
                let mut c = cfg.clone();
                c.ts.enabled = true;
                c.ablation.tau_optimizer = opt;
                let run = run_finetune(&c, &weights, cli.dump_masks)?;
                write_run(out, &format!("{tag}_"), &run)?;
                runs.push((tag, run));
            }
            write(out, "tau_trajectories.csv", &trajectory_csv(&runs[0].1, &runs[1].1))?;
            let summary: Vec<_> = runs
                .iter()
                .map(|(tag, r)| {
                    serde_json::json!({
                        "tau_optimizer": tag,
                        "val_accuracy": r.summary.val_accuracy,
                        "tau_std_last_half": r.summary.modules.iter().map(|m| (m.id.clone(), m.tau_std_last_half)).collect::<std::collections::BTreeMap<_, _>>(),
                    })
                })
                .collect();
            write(out, "ablation.json", &json(&summary))?;
        }
        Command::SparsityTable | Command::RankModules | Command::Sweep => {
            let (table, weights) = table_for(cfg, out, cli.dump_masks)?;
            write(out, "sparsity_table.csv", &table.to_csv())?;
            write(out, "sparsity_table.json", &json(&table))?;
            if cli.command == Command::RankModules {
                let ranking = rank_modules(&table, &cfg.analysis.strategy)?;
                write(out, "ranking.csv", &ranking.to_csv())?;
                write(out, "ranking.json", &json(&ranking))?;
            }
            if cli.command == Command::Sweep {
                let (train, val) = finetune_data(cfg)?;
                let rows = sweep_percentages(&weights, &train, &val, cfg, &table, &cfg.analysis.percents)?;
                write(out, "sweep.csv", &sweep_csv(&rows))?;
                write(out, "sweep.json", &json(&rows))?;
            }
        }
    }
    Ok(())
}

/// The configured backbone, or a fresh one saved next to the outputs.
fn backbone(cfg: &RunConfig, out: &Path) -> Result<BackboneWeights> {
    if cfg.paths.backbone.is_none() {
        eprintln!("no paths.backbone; pretraining in-process");
    }
    let (weights, report) = load_or_pretrain(cfg)?;
    if let Some(r) = report {
        eprintln!("pretrained backbone: validation accuracy {:.4}", r.val_accuracy);
        Checkpoint::backbone_only(weights.clone())?.save(&out.join("backbone.json"))?;
        write(out, "pretrain_report.json", &json(&r))?;
    }
    Ok(weights)
}

fn run_finetune(cfg: &RunConfig, weights: &BackboneWeights, dump_masks: bool) -> Result<FinetuneRun> {
    let (train, val) = finetune_data(cfg)?;
    eprintln!(
        "fine-tuning {} ({}, TS {}) for {} epochs",
        cfg.peft.variant.name(),
        match cfg.ablation.tau_optimizer {
            TauOptimizer::Adam => "adam thresholds",
            TauOptimizer::PlainSgd => "plain-SGD thresholds",
        },
        if cfg.ts.enabled { "on" } else { "off" },
        cfg.optimizer.epochs
    );
    let run = finetune(cfg, weights, &train, &val, &FinetuneOptions { dump_masks })?;
    eprintln!(
        "validation accuracy {:.4}, mean sparsity {:.4}",
        run.summary.val_accuracy, run.summary.mean_sparsity
    );
    Ok(run)
}

fn write_run(out: &Path, prefix: &str, run: &FinetuneRun) -> Result<()> {
    run.checkpoint.save(&out.join(format!("{prefix}checkpoint.json")))?;
    write(out, &format!("{prefix}metrics.jsonl"), &run.metrics_jsonl())?;
    write(out, &format!("{prefix}summary.json"), &json(&run.summary))?;
    if let Some(m) = &run.train_masks {
        write(out, &format!("{prefix}masks.txt"), m)?;
    }
    Ok(())
}

fn trajectory_csv(adam: &FinetuneRun, sgd: &FinetuneRun) -> String {
    let mut out = String::from("step,module,adam_tau,plain_sgd_tau\n");
    let ids: Vec<&str> = adam.summary.modules.iter().map(|m| m.id.as_str()).collect();
    for (m, id) in ids.iter().enumerate() {
        for (k, (a, s)) in adam.tau_trajectories[m]
            .iter()
            .zip(&sgd.tau_trajectories[m])
            .enumerate()
        {
            let _ = writeln!(out, "{},{id},{a},{s}", k + 1);
        }
    }
    out
}

/// Sparsity table from `paths.checkpoint`, or from a token-selective
/// fine-tune run here.
fn table_for(cfg: &RunConfig, out: &Path, dump_masks: bool) -> Result<(SparsityTable, BackboneWeights)> {
    let (_, val) = finetune_data(cfg)?;
    let ck = match &cfg.paths.checkpoint {
        Some(p) => Checkpoint::load(p)?,
        None => {
            let mut c = cfg.clone();
            c.ts.enabled = true;
            let weights = backbone(&c, out)?;
            let run = run_finetune(&c, &weights, dump_masks)?;
            write_run(out, "ts_", &run)?;
            run.checkpoint
        }
    };
    Ok((module_sparsity_table(&ck, &val)?, ck.backbone))
}
