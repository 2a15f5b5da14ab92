use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set", "n_train=48",
    "--set", "n_val=16",
    "--set", "n_test=24",
    "--set", "epochs_env=2",
    "--set", "epochs_inv=2",
    "--set", "batch_size=16",
];

fn hierenv(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hierenv"))
        .arg("--out")
        .arg(out)
        .args(SMALL)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn error_record(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("error line");
    serde_json::from_str(line).expect("stderr ends with a json record")
}

#[test]
fn pipeline_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = hierenv(dir.path(), &["--set", "dump_edges=true", "pipeline"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "data/manifest.json",
        "data/train.jsonl",
        "stage1/params.json",
        "envs.jsonl",
        "edges.jsonl",
        "stage2/params.json",
        "predictions.jsonl",
        "metrics.csv",
        "summary.json",
        "diversity.json",
        "env_histogram.csv",
        "config.toml",
        "run_manifest.json",
    ] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let stdout: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stdout["strategy"], "hier");
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 1);
    assert!(manifest["artifacts"]["metrics.csv"].as_str().unwrap().len() == 64);
}

#[test]
fn pipeline_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = hierenv(d.path(), &["--seed", "3", "pipeline"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |d: &tempfile::TempDir, f: &str| fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&a, "metrics.csv"), read(&b, "metrics.csv"));
    assert_eq!(read(&a, "predictions.jsonl"), read(&b, "predictions.jsonl"));
}

#[test]
fn baseline_strategy_runs_staged_commands() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["generate-data", "assign-env", "train-inv", "evaluate", "diversity"] {
        let o = hierenv(dir.path(), &["--strategy", "rand#2", cmd]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("rand#2,1,"));
}

#[test]
fn missing_upstream_artifact_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = hierenv(dir.path(), &["train-inv"]);
    assert_eq!(o.status.code(), Some(3));
    let rec = error_record(&o);
    assert_eq!(rec["error"], "missing_artifact");
    assert!(rec["path"].as_str().unwrap().ends_with("envs.jsonl"));

    let o = hierenv(dir.path(), &["train-env"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(error_record(&o)["path"].as_str().unwrap().ends_with("manifest.json"));
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = hierenv(dir.path(), &["--set", "env_counts=[4, 2]", "pipeline"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_record(&o)["error"], "config");
    let o = hierenv(dir.path(), &["--strategy", "flat", "pipeline"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_and_env_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 9\nlambda = 1.0\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hierenv"))
        .args(["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .args(SMALL)
        .arg("generate-data")
        .env("HIERENV_LAMBDA", "0.001")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let written = fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert!(written.contains("seed = 9"));
    assert!(written.contains("lambda = 0.001"));
}

#[test]
fn gradcheck_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = hierenv(dir.path(), &["gradcheck"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["entries"].as_array().unwrap().len(), 14);
}
