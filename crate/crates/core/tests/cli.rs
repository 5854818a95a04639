use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tspeft"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|_| panic!("no JSON error line in {stderr:?}"))
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(error_line(&out)["error"]["kind"], "usage");
}

#[test]
fn bad_flag_is_a_usage_error() {
    let out = run(&["finetune", "--seed", "seven"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_or_invalid_config_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["finetune", "--config", "/nonexistent.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"]["kind"], "config");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"ts": {"lamda": 1}}"#).unwrap();
    let out = run(&[
        "finetune",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(
        !dir.path().join("resolved_config.json").exists(),
        "no work before validation"
    );

    let out = run(&["evaluate", "--config", config("smoke.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "evaluate without a checkpoint");
}

#[test]
fn runtime_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let ck = dir.path().join("ck.json");
    std::fs::write(&ck, "{\"schema_version\": 99}").unwrap();
    std::fs::write(&cfg, format!(r#"{{"paths": {{"checkpoint": "{}"}}}}"#, ck.display())).unwrap();
    let out = run(&[
        "evaluate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"]["kind"], "checkpoint");
}

#[test]
fn finetune_twice_is_byte_identical_and_evaluates() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = config("smoke.json");
    for dir in [&a, &b] {
        let out = run(&[
            "finetune",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--dump-masks",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in [
        "metrics.jsonl",
        "checkpoint.json",
        "summary.json",
        "masks.txt",
        "resolved_config.json",
        "backbone.json",
    ] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
    let resolved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 7);
    let metrics = std::fs::read_to_string(a.path().join("metrics.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    assert!(last["summary"]["val_accuracy"].is_number());

    // Evaluate the fresh checkpoint through a second config.
    let eval_dir = tempfile::tempdir().unwrap();
    let mut cfg2: serde_json::Value = serde_json::from_slice(&std::fs::read(&cfg).unwrap()).unwrap();
    cfg2["paths"] = serde_json::json!({ "checkpoint": a.path().join("checkpoint.json") });
    let cfg2_path = eval_dir.path().join("eval.json");
    std::fs::write(&cfg2_path, cfg2.to_string()).unwrap();
    let out = run(&[
        "evaluate",
        "--config",
        cfg2_path.to_str().unwrap(),
        "--dump-masks",
        "--out",
        eval_dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(eval_dir.path().join("eval.json")).unwrap()).unwrap();
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(report["accuracy"], summary["val_accuracy"]);
    assert!(eval_dir.path().join("masks.txt").exists());
}

#[test]
fn gradcheck_passes_on_the_shipped_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gradcheck",
        "--config",
        config("gradcheck_small.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn analysis_commands_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("smoke.json");
    for cmd in ["sparsity-table", "rank-modules", "sweep", "ablate-tau"] {
        let out = run(&[
            cmd,
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let sweep = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 4);
    let ranking = std::fs::read_to_string(dir.path().join("ranking.csv")).unwrap();
    assert_eq!(ranking.lines().filter(|l| l.ends_with(",1")).count(), 5);
    let traj = std::fs::read_to_string(dir.path().join("tau_trajectories.csv")).unwrap();
    assert!(traj.starts_with("step,module,adam_tau,plain_sgd_tau\n"));
    assert!(dir.path().join("sparsity_table.csv").exists());
}
