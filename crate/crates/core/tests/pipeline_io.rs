use std::fs;

use hierenv::env_infer::EnvAssignment;
use hierenv::pipeline::{self, Strategy};
use hierenv::{Error, RunConfig};

fn small(out: &std::path::Path, extra: &[(&str, &str)]) -> RunConfig {
    let mut kv: Vec<(String, String)> = [
        ("n_train", "40"),
        ("n_val", "12"),
        ("n_test", "20"),
        ("epochs_env", "2"),
        ("epochs_inv", "2"),
        ("batch_size", "16"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    kv.push(("out".into(), format!("{:?}", out.to_str().unwrap())));
    kv.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    RunConfig::load_with_env(None, &[], &kv).unwrap()
}

#[test]
fn staged_commands_match_in_memory_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &[]);
    let summary = pipeline::cmd_pipeline(&cfg).unwrap();
    let ds = pipeline::load_dataset(&cfg).unwrap();
    let mem = pipeline::run_strategy(&ds, Strategy::Hier, &cfg, cfg.seed).unwrap();
    assert_eq!(summary.metrics, mem.metrics);
    let envs = EnvAssignment::load(&dir.path().join("envs.jsonl")).unwrap();
    assert_eq!(envs.envs(), mem.inference.assignment.envs());
    let preds = pipeline::read_predictions(&cfg).unwrap();
    for (p, q) in preds.iter().zip(&mem.probs) {
        assert_eq!(&p.probs, q);
    }
}

#[test]
fn run_manifest_hashes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &[("strategy", "\"erm\"")]);
    pipeline::cmd_pipeline(&cfg).unwrap();
    let manifest: pipeline::RunManifest =
        serde_json::from_slice(&fs::read(dir.path().join(pipeline::RUN_MANIFEST)).unwrap()).unwrap();
    assert_eq!(manifest.config_hash, cfg.hash().unwrap());
    for (rel, digest) in &manifest.artifacts {
        let bytes = fs::read(dir.path().join(rel)).unwrap();
        assert_eq!(&hierenv::config::hex_digest(&bytes), digest, "{rel}");
    }
    assert!(manifest.artifacts.contains_key("config.toml"));
    assert!(!dir.path().join("stage1").exists());
}

#[test]
fn downstream_commands_name_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &[]);
    let missing = |r: hierenv::Result<()>| match r {
        Err(Error::MissingArtifact(p)) => p,
        other => panic!("expected missing artifact, got {other:?}"),
    };
    let p = missing(pipeline::cmd_train_env(&cfg).map(|_| ()));
    assert!(p.ends_with("data/manifest.json"));
    pipeline::cmd_generate_data(&cfg).unwrap();
    let p = missing(pipeline::cmd_assign_env(&cfg).map(|_| ()));
    assert!(p.ends_with("stage1/params.json"));
    let p = missing(pipeline::cmd_train_inv(&cfg).map(|_| ()));
    assert!(p.ends_with("envs.jsonl"));
    let p = missing(pipeline::cmd_diversity(&cfg).map(|_| ()));
    assert!(p.ends_with("envs.jsonl"));
    pipeline::cmd_train_env(&cfg).unwrap();
    pipeline::cmd_assign_env(&cfg).unwrap();
    let p = missing(pipeline::cmd_evaluate(&cfg).map(|_| ()));
    assert!(p.ends_with("stage2/params.json"));
}

#[test]
fn invariant_adjacency_variant_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &[("invariant_adjacency", "true"), ("dump_edges", "true")]);
    let s = pipeline::cmd_pipeline(&cfg).unwrap();
    assert!((0.0..=1.0).contains(&s.metrics.accuracy));
    let edges = fs::read_to_string(dir.path().join("edges.jsonl")).unwrap();
    assert_eq!(edges.lines().count(), 40 * 3);
}

#[test]
fn erm_equals_stage_two_without_penalty() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &[]);
    let ds = hierenv::synthetic::generate_synthetic(&cfg.synthetic()).unwrap();
    let erm = pipeline::run_strategy(&ds, Strategy::Erm, &cfg, 2).unwrap();
    let mut s2 = cfg.stage2();
    s2.lambda = 0.0;
    let envs = vec![0; ds.train.len()];
    let direct = hierenv::invariant::train_stage2(
        &ds.train,
        &envs,
        &ds.val,
        ds.num_classes,
        &s2,
        &hierenv::rng::RngStreams::new(2),
    )
    .unwrap();
    assert_eq!(erm.classifier.store.flatten(), direct.store.flatten());
}

#[test]
fn ablation_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &[("seeds", "[1, 2]")]);
    let report = pipeline::cmd_ablation(&cfg, &[Strategy::Erm, Strategy::Random(2)]).unwrap();
    assert_eq!(report.runs.len(), 4);
    assert_eq!(report.diversity.len(), 2);
    let table = fs::read_to_string(dir.path().join("ablation/table.csv")).unwrap();
    assert!(table.starts_with("strategy,metric,mean,std,n\n"));
    assert_eq!(table.lines().count(), 1 + 2 * pipeline::ABLATION_METRICS.len());
    for r in &report.rows {
        assert!(r.std >= 0.0);
    }
}
