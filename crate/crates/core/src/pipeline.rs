//! End-to-end runs: environment strategies, file-backed commands, gradient
//! checks and ablation sweeps.
//!
//! Artifacts of a run live under `RunConfig::out`:
//!
//! ```text
//! data/{train,val,test}.jsonl, data/manifest.json
//! stage1/params.json, stage1/history.json
//! envs.jsonl, edges.jsonl (with dump_edges)
//! stage2/params.json, stage2/history.json
//! predictions.jsonl, metrics.csv, summary.json
//! diversity.json, env_histogram.csv
//! gradcheck.json
//! config.toml, run_manifest.json
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{hex_digest, RunConfig};
use crate::env_infer::{
    assign_with_dump, invariant_subgraphs, stage1_forward, train_stage1, EnvAssignment, EpochRecord, Stage1Config,
    Stage1Model, TrainedStage1,
};
use crate::error::{Error, Result};
use crate::evaluation::{diversity_report, mean_std, AblationRow, DiversityReport};
use crate::gradcheck::finite_difference_check;
use crate::graph::{batch_graphs, save_graphs, Dataset, DatasetManifest, Graph};
use crate::invariant::{
    invariant_loss, load_predictions, predict, save_predictions, train_stage2, InvariantClassifier, Stage2Config,
    TrainedClassifier,
};
use crate::metrics::{accuracy, env_label_dependency, env_recovery_score, roc_auc};
use crate::params::ParamStore;
use crate::rng::{RngStreams, STREAM_DATA, STREAM_ENV, STREAM_GUMBEL, STREAM_INIT};
use crate::subgraph::{EdgeDumpRecord, MaskGradient};
use crate::synthetic::{generate_graph, generate_synthetic, NUM_CLASSES};
use crate::tape::Tape;

/// How training environments are obtained for stage two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// One environment and no penalty.
    Erm,
    /// Uniformly random environments.
    Random(usize),
    /// Generating environment ids from the data.
    Real,
    /// Single-level inference with `k` environments.
    InferFlat(usize),
    /// Hierarchical inference with the configured environment counts.
    Hier,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        let count = |rest: &str| -> Result<usize> {
            match rest.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(k),
                _ => Err(Error::Config(format!("bad environment count in strategy {s:?}"))),
            }
        };
        match s {
            "erm" => Ok(Self::Erm),
            "real" => Ok(Self::Real),
            "hier" => Ok(Self::Hier),
            _ => {
                if let Some(rest) = s.strip_prefix("rand#") {
                    Ok(Self::Random(count(rest)?))
                } else if let Some(rest) = s.strip_prefix("infer-flat#") {
                    let k = count(rest)?;
                    if k < 2 {
                        return Err(Error::Config("infer-flat needs at least 2 environments".into()));
                    }
                    Ok(Self::InferFlat(k))
                } else {
                    Err(Error::Config(format!(
                        "unknown strategy {s:?} (expected erm, real, hier, rand#k or infer-flat#k)"
                    )))
                }
            }
        }
    }

    /// Whether the strategy trains stage one.
    pub fn infers(&self) -> bool {
        matches!(self, Self::InferFlat(_) | Self::Hier)
    }

    /// Stage-one config for inferring strategies.
    pub fn stage1_config(&self, cfg: &RunConfig) -> Option<Stage1Config> {
        let mut s1 = cfg.stage1();
        match self {
            Self::Hier => Some(s1),
            Self::InferFlat(k) => {
                s1.hierarchy.env_counts = vec![*k];
                Some(s1)
            }
            _ => None,
        }
    }

    pub fn stage2_config(&self, cfg: &RunConfig) -> Stage2Config {
        let mut s2 = cfg.stage2();
        if *self == Self::Erm {
            s2.lambda = 0.0;
        }
        s2
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Erm => write!(f, "erm"),
            Self::Random(k) => write!(f, "rand#{k}"),
            Self::Real => write!(f, "real"),
            Self::InferFlat(k) => write!(f, "infer-flat#{k}"),
            Self::Hier => write!(f, "hier"),
        }
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub strategy: String,
    pub seed: u64,
    pub accuracy: f64,
    pub auc: f64,
    pub inter_env_distance: f64,
    pub recovery: f64,
    pub dependency: f64,
}

pub const METRICS_HEADER: &str = "strategy,seed,accuracy,auc,inter_env_distance,recovery,dependency";

impl RunMetrics {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.strategy, self.seed, self.accuracy, self.auc, self.inter_env_distance, self.recovery, self.dependency
        )
    }
}

pub fn metrics_csv(rows: &[RunMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Environments of the training split under `strategy`.
pub struct EnvInference {
    pub assignment: EnvAssignment,
    pub stage1: Option<TrainedStage1>,
    pub edges: Vec<EdgeDumpRecord>,
}

fn ids(graphs: &[Graph]) -> Vec<String> {
    graphs.iter().map(|g| g.id.clone()).collect()
}

/// Trains stage one (for inferring strategies) and assigns environments.
pub fn infer_envs(ds: &Dataset, strategy: Strategy, cfg: &RunConfig, streams: &RngStreams) -> Result<EnvInference> {
    if let Some(s1) = strategy.stage1_config(cfg) {
        let trained = train_stage1(&ds.train, &ds.val, ds.num_classes, &s1, streams)?;
        let (assignment, edges) = assign_with_dump(&ds.train, &trained)?;
        return Ok(EnvInference {
            assignment,
            stage1: Some(trained),
            edges,
        });
    }
    Ok(EnvInference {
        assignment: baseline_assignment(&ds.train, strategy, streams)?,
        stage1: None,
        edges: Vec::new(),
    })
}

/// Environments for strategies that do not infer them.
pub fn baseline_assignment(train: &[Graph], strategy: Strategy, streams: &RngStreams) -> Result<EnvAssignment> {
    let (envs, k) = match strategy {
        Strategy::Erm => (vec![0; train.len()], 1),
        Strategy::Random(k) => {
            let mut rng = streams.stream(&format!("{STREAM_ENV}/rand"));
            ((0..train.len()).map(|_| rng.gen_range(0..k)).collect(), k)
        }
        Strategy::Real => {
            let envs = train
                .iter()
                .map(|g| {
                    g.true_env
                        .ok_or_else(|| Error::Contract(format!("graph {} has no generating environment", g.id)))
                })
                .collect::<Result<Vec<_>>>()?;
            let k = envs.iter().max().map_or(1, |m| m + 1);
            (envs, k)
        }
        Strategy::InferFlat(_) | Strategy::Hier => {
            return Err(Error::Contract(format!("{strategy} environments require a trained stage one")))
        }
    };
    Ok(EnvAssignment::from_labels(&ids(train), &envs, k))
}

/// Diversity of the generating environment id across assigned environments.
pub fn train_diversity(strategy: &str, train: &[Graph], envs: &[usize]) -> Result<DiversityReport> {
    let feats = train
        .iter()
        .map(|g| {
            g.true_env
                .map(|e| e as f64)
                .ok_or_else(|| Error::Contract(format!("graph {} has no generating environment", g.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    diversity_report(strategy, &feats, envs)
}

/// Test accuracy and AUC plus environment diagnostics on the training split.
pub fn compute_metrics(
    strategy: &str,
    seed: u64,
    ds_train: &[Graph],
    envs: &[usize],
    test: &[Graph],
    probs: &[Vec<f64>],
) -> Result<(RunMetrics, DiversityReport)> {
    let labels: Vec<usize> = test.iter().map(|g| g.label).collect();
    let predicted: Vec<usize> = probs.iter().map(|p| crate::env_infer::argmax(p)).collect();
    let acc = accuracy(&predicted, &labels)?;
    let scores: Vec<f64> = probs.iter().map(|p| p.get(1).copied().unwrap_or(0.0)).collect();
    let positive: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
    let auc = roc_auc(&scores, &positive)?;
    let diversity = train_diversity(strategy, ds_train, envs)?;
    let family = ds_train
        .iter()
        .map(|g| {
            g.true_family
                .ok_or_else(|| Error::Contract(format!("graph {} has no family", g.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let train_labels: Vec<usize> = ds_train.iter().map(|g| g.label).collect();
    let metrics = RunMetrics {
        strategy: strategy.to_string(),
        seed,
        accuracy: acc,
        auc,
        inter_env_distance: diversity.inter_env_distance,
        recovery: env_recovery_score(envs, &family)?,
        dependency: env_label_dependency(envs, &train_labels)?,
    };
    Ok((metrics, diversity))
}

/// Everything produced by one in-memory run.
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub diversity: DiversityReport,
    pub inference: EnvInference,
    pub classifier: TrainedClassifier,
    pub probs: Vec<Vec<f64>>,
}

/// Replaces every split by its invariant subgraphs under `stage1`.
pub fn invariant_dataset(ds: &Dataset, stage1: &TrainedStage1) -> Result<Dataset> {
    Ok(Dataset {
        train: invariant_subgraphs(&ds.train, stage1)?,
        val: invariant_subgraphs(&ds.val, stage1)?,
        test: invariant_subgraphs(&ds.test, stage1)?,
        num_classes: ds.num_classes,
        feature_dim: ds.feature_dim,
    })
}

/// Full two-stage run of one strategy and seed, without touching disk.
pub fn run_strategy(ds: &Dataset, strategy: Strategy, cfg: &RunConfig, seed: u64) -> Result<RunOutcome> {
    let streams = RngStreams::new(seed);
    let inference = infer_envs(ds, strategy, cfg, &streams)?;
    let envs = inference.assignment.envs_for(&ds.train)?;
    let view = match (&inference.stage1, cfg.invariant_adjacency) {
        (Some(s1), true) => Some(invariant_dataset(ds, s1)?),
        _ => None,
    };
    let data = view.as_ref().unwrap_or(ds);
    let classifier = train_stage2(
        &data.train,
        &envs,
        &data.val,
        ds.num_classes,
        &strategy.stage2_config(cfg),
        &streams,
    )?;
    let probs = predict(&classifier, &data.test)?;
    let (metrics, diversity) = compute_metrics(&strategy.to_string(), seed, &ds.train, &envs, &ds.test, &probs)?;
    Ok(RunOutcome {
        metrics,
        diversity,
        inference,
        classifier,
        probs,
    })
}

// ---------------------------------------------------------------- commands

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write(path, bytes)
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

fn strategy_of(cfg: &RunConfig) -> Result<Strategy> {
    Strategy::parse(&cfg.strategy)
}

fn stage1_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("stage1")
}

fn stage2_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("stage2")
}

fn envs_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("envs.jsonl")
}

/// Reproducibility record written after every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub strategy: String,
    /// SHA-256 of every artifact under the output directory, by relative path.
    pub artifacts: BTreeMap<String, String>,
}

pub const RUN_MANIFEST: &str = "run_manifest.json";

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            if rel != RUN_MANIFEST {
                out.insert(rel, hex_digest(&fs::read(&path)?));
            }
        }
    }
    Ok(())
}

/// Writes `config.toml` and refreshes `run_manifest.json`.
pub fn write_run_manifest(cfg: &RunConfig) -> Result<RunManifest> {
    fs::create_dir_all(&cfg.out)?;
    write(&cfg.out.join("config.toml"), cfg.to_toml()?)?;
    let mut artifacts = BTreeMap::new();
    collect_files(&cfg.out, &cfg.out, &mut artifacts)?;
    let manifest = RunManifest {
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        strategy: cfg.strategy.clone(),
        artifacts,
    };
    write_json(&cfg.out.join(RUN_MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Loads the dataset named by the config's manifest path.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.manifest_path();
    let manifest = DatasetManifest::load(&path)?;
    manifest.load_dataset(path.parent().unwrap_or(Path::new(".")))
}

/// Generates the synthetic dataset into `<out>/data`. Returns the manifest path.
pub fn cmd_generate_data(cfg: &RunConfig) -> Result<PathBuf> {
    let ds = generate_synthetic(&cfg.synthetic())?;
    let dir = cfg.out.join("data");
    fs::create_dir_all(&dir)?;
    save_graphs(&dir.join("train.jsonl"), &ds.train)?;
    save_graphs(&dir.join("val.jsonl"), &ds.val)?;
    save_graphs(&dir.join("test.jsonl"), &ds.test)?;
    let manifest = DatasetManifest {
        train: "train.jsonl".into(),
        val: "val.jsonl".into(),
        test: "test.jsonl".into(),
        num_classes: ds.num_classes,
        feature_dim: ds.feature_dim,
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    write_run_manifest(cfg)?;
    Ok(path)
}

/// Trains stage one for an inferring strategy.
pub fn cmd_train_env(cfg: &RunConfig) -> Result<TrainedStage1> {
    let strategy = strategy_of(cfg)?;
    let s1 = strategy
        .stage1_config(cfg)
        .ok_or_else(|| Error::Config(format!("strategy {strategy} has no environment inference stage")))?;
    let ds = load_dataset(cfg)?;
    let trained = train_stage1(&ds.train, &ds.val, ds.num_classes, &s1, &RngStreams::new(cfg.seed))?;
    let dir = stage1_dir(cfg);
    fs::create_dir_all(&dir)?;
    trained.store.save(&dir.join("params.json"))?;
    write_json(&dir.join("history.json"), &trained.history)?;
    write_run_manifest(cfg)?;
    Ok(trained)
}

fn load_stage1(cfg: &RunConfig, strategy: Strategy, ds: &Dataset) -> Result<Option<TrainedStage1>> {
    let Some(s1) = strategy.stage1_config(cfg) else {
        return Ok(None);
    };
    let saved = ParamStore::load(&require(stage1_dir(cfg).join("params.json"))?)?;
    Ok(Some(TrainedStage1::from_store(&saved, ds.feature_dim, ds.num_classes, &s1)?))
}

/// Writes `envs.jsonl` (and `edges.jsonl` when requested) for the training split.
pub fn cmd_assign_env(cfg: &RunConfig) -> Result<EnvAssignment> {
    let strategy = strategy_of(cfg)?;
    let ds = load_dataset(cfg)?;
    let (assignment, edges) = match load_stage1(cfg, strategy, &ds)? {
        Some(trained) => assign_with_dump(&ds.train, &trained)?,
        None => (baseline_assignment(&ds.train, strategy, &RngStreams::new(cfg.seed))?, Vec::new()),
    };
    fs::create_dir_all(&cfg.out)?;
    assignment.save(&envs_path(cfg))?;
    if cfg.dump_edges {
        let mut bytes = Vec::new();
        for e in &edges {
            serde_json::to_writer(&mut bytes, e)?;
            bytes.push(b'\n');
        }
        write(&cfg.out.join("edges.jsonl"), bytes)?;
    }
    write_run_manifest(cfg)?;
    Ok(assignment)
}

fn stage2_view(cfg: &RunConfig, strategy: Strategy, ds: Dataset) -> Result<Dataset> {
    if !cfg.invariant_adjacency {
        return Ok(ds);
    }
    match load_stage1(cfg, strategy, &ds)? {
        Some(s1) => invariant_dataset(&ds, &s1),
        None => Ok(ds),
    }
}

/// Trains the invariant classifier on the assigned environments.
pub fn cmd_train_inv(cfg: &RunConfig) -> Result<TrainedClassifier> {
    let strategy = strategy_of(cfg)?;
    let assignment = EnvAssignment::load(&envs_path(cfg))?;
    let ds = stage2_view(cfg, strategy, load_dataset(cfg)?)?;
    let envs = assignment.envs_for(&ds.train)?;
    let classifier = train_stage2(
        &ds.train,
        &envs,
        &ds.val,
        ds.num_classes,
        &strategy.stage2_config(cfg),
        &RngStreams::new(cfg.seed),
    )?;
    let dir = stage2_dir(cfg);
    fs::create_dir_all(&dir)?;
    classifier.store.save(&dir.join("params.json"))?;
    write_json(&dir.join("history.json"), &classifier.history)?;
    write_run_manifest(cfg)?;
    Ok(classifier)
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub metrics: RunMetrics,
    pub num_envs: usize,
    pub env_sizes: BTreeMap<usize, usize>,
    pub config_hash: String,
    pub stage1_history: Option<Vec<EpochRecord>>,
    pub stage2_history: Vec<EpochRecord>,
}

fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    Ok(serde_json::from_slice(&fs::read(require(path.to_path_buf())?)?)?)
}

/// Predicts the test split and writes predictions, metrics and summary.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<RunSummary> {
    let strategy = strategy_of(cfg)?;
    let assignment = EnvAssignment::load(&envs_path(cfg))?;
    let saved = ParamStore::load(&require(stage2_dir(cfg).join("params.json"))?)?;
    let raw = load_dataset(cfg)?;
    let envs = assignment.envs_for(&raw.train)?;
    let ds = stage2_view(cfg, strategy, raw.clone())?;
    let classifier = TrainedClassifier::from_store(&saved, ds.feature_dim, ds.num_classes, &strategy.stage2_config(cfg))?;
    let probs = predict(&classifier, &ds.test)?;
    save_predictions(&cfg.out.join("predictions.jsonl"), &ds.test, &probs)?;
    let (metrics, _) = compute_metrics(&strategy.to_string(), cfg.seed, &raw.train, &envs, &raw.test, &probs)?;
    write(&cfg.out.join("metrics.csv"), metrics_csv(std::slice::from_ref(&metrics)))?;
    let mut env_sizes = BTreeMap::new();
    for &e in &envs {
        *env_sizes.entry(e).or_insert(0) += 1;
    }
    let stage1_history = if strategy.infers() {
        Some(read_history(&stage1_dir(cfg).join("history.json"))?)
    } else {
        None
    };
    let summary = RunSummary {
        metrics,
        num_envs: env_sizes.len(),
        env_sizes,
        config_hash: cfg.hash()?,
        stage1_history,
        stage2_history: read_history(&stage2_dir(cfg).join("history.json"))?,
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    write_run_manifest(cfg)?;
    Ok(summary)
}

/// Writes `diversity.json` and `env_histogram.csv` for the assigned environments.
pub fn cmd_diversity(cfg: &RunConfig) -> Result<DiversityReport> {
    let assignment = EnvAssignment::load(&envs_path(cfg))?;
    let ds = load_dataset(cfg)?;
    let envs = assignment.envs_for(&ds.train)?;
    let report = train_diversity(&cfg.strategy, &ds.train, &envs)?;
    write_json(&cfg.out.join("diversity.json"), &report)?;
    write(&cfg.out.join("env_histogram.csv"), report.histogram_csv())?;
    write_run_manifest(cfg)?;
    Ok(report)
}

/// generate (when no dataset exists) → train_env → assign_env → train_inv →
/// evaluate → diversity.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    let strategy = strategy_of(cfg)?;
    if !cfg.manifest_path().exists() {
        if cfg.manifest.is_some() {
            return Err(Error::MissingArtifact(cfg.manifest_path()));
        }
        cmd_generate_data(cfg)?;
    }
    if strategy.infers() {
        cmd_train_env(cfg)?;
    }
    cmd_assign_env(cfg)?;
    cmd_train_inv(cfg)?;
    let summary = cmd_evaluate(cfg)?;
    cmd_diversity(cfg)?;
    Ok(summary)
}

/// Reads back the single metrics row of a finished run.
pub fn read_metrics(cfg: &RunConfig) -> Result<String> {
    Ok(fs::read_to_string(require(cfg.out.join("metrics.csv"))?)?)
}

/// Reads back `predictions.jsonl`.
pub fn read_predictions(cfg: &RunConfig) -> Result<Vec<crate::invariant::PredictionRecord>> {
    load_predictions(&require(cfg.out.join("predictions.jsonl"))?)
}

// --------------------------------------------------------------- gradcheck

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_COORDS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub loss: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub eps: f64,
    pub tolerance: f64,
    pub entries: Vec<GradcheckEntry>,
    pub passed: bool,
}

/// Seeded batch of four synthetic graphs with both labels present.
pub fn gradcheck_batch(seed: u64) -> Result<Vec<Graph>> {
    let streams = RngStreams::new(seed);
    let mut graphs = Vec::new();
    let mut idx = 0u64;
    while graphs.len() < 4 {
        let mut rng = streams.substream(&format!("{STREAM_DATA}/gradcheck"), idx);
        let g = generate_graph(&mut rng, format!("gc-{idx}"), 0.5, 0.0)?;
        let want = graphs.len() % 2;
        if g.label == want {
            graphs.push(g);
        }
        idx += 1;
    }
    Ok(graphs)
}

/// Finite-difference checks of every stage-one loss term per level, the
/// summed hierarchy loss, and the stage-two objective, all with frozen
/// random streams and the relaxed mask gradient.
pub fn run_gradcheck(cfg: &RunConfig) -> Result<GradcheckSummary> {
    let graphs = gradcheck_batch(cfg.seed)?;
    let batch = batch_graphs(&graphs)?;
    let d = graphs[0].feature_dim();
    let streams = RngStreams::new(cfg.seed);
    let s1 = cfg.stage1();
    let mut store1 = ParamStore::new();
    let model1 = Stage1Model::new(&mut store1, d, NUM_CLASSES, &s1, &mut streams.stream(&format!("{STREAM_INIT}/stage1")))?;
    let mut pick = streams.stream("gradcheck/pick");
    let mut entries = Vec::new();

    let mut targets: Vec<(String, Option<(usize, usize)>)> = Vec::new();
    for k in 0..s1.hierarchy.levels() {
        for (i, name) in ["ed", "envcon", "labelcon", "hier"].iter().enumerate() {
            targets.push((format!("level{}.{name}", k + 1), Some((k, i))));
        }
    }
    targets.push(("hei".into(), None));
    for (name, target) in targets {
        let report = finite_difference_check(&store1, streams, GRADCHECK_EPS, GRADCHECK_COORDS, &mut pick, |s, st| {
            let mut tape = Tape::new();
            let mut rng = st.stream(&format!("{STREAM_GUMBEL}/gradcheck"));
            let pass = stage1_forward(&mut tape, s, &model1, &batch, &s1, Some(&mut rng), MaskGradient::Relaxed)?;
            let v = match target {
                Some((k, i)) => pass.level_vars[k][i],
                None => pass.total,
            };
            Ok((tape, v))
        })?;
        log::info!("gradcheck {name}: max relative error {:.3e}", report.max_rel_error);
        entries.push(GradcheckEntry {
            loss: name,
            max_rel_error: report.max_rel_error,
            coords_checked: report.coords_checked,
            passed: report.passes(GRADCHECK_TOL),
        });
    }

    let s2 = cfg.stage2();
    let mut store2 = ParamStore::new();
    let model2 = InvariantClassifier::new(&mut store2, d, NUM_CLASSES, &s2, &mut streams.stream(&format!("{STREAM_INIT}/stage2")))?;
    let envs = [0, 1, 0, 1];
    let lambda = if s2.lambda > 0.0 { s2.lambda } else { 1.0 };
    let report = finite_difference_check(&store2, streams, GRADCHECK_EPS, GRADCHECK_COORDS, &mut pick, |s, st| {
        let mut tape = Tape::new();
        let mut rng = st.stream("dropout/gradcheck");
        let logits = model2.forward(&mut tape, s, &batch, Some(&mut rng))?;
        let loss = invariant_loss(&mut tape, logits, &batch.labels, &envs, lambda)?;
        Ok((tape, loss.total))
    })?;
    log::info!("gradcheck inv: max relative error {:.3e}", report.max_rel_error);
    entries.push(GradcheckEntry {
        loss: "inv".into(),
        max_rel_error: report.max_rel_error,
        coords_checked: report.coords_checked,
        passed: report.passes(GRADCHECK_TOL),
    });

    let passed = entries.iter().all(|e| e.passed);
    Ok(GradcheckSummary {
        eps: GRADCHECK_EPS,
        tolerance: GRADCHECK_TOL,
        entries,
        passed,
    })
}

/// Runs the gradient checks, writes `gradcheck.json`, and fails if any
/// check exceeds the tolerance.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckSummary> {
    let summary = run_gradcheck(cfg)?;
    write_json(&cfg.out.join("gradcheck.json"), &summary)?;
    write_run_manifest(cfg)?;
    if let Some(bad) = summary.entries.iter().find(|e| !e.passed) {
        return Err(Error::GradientCheck {
            name: bad.loss.clone(),
            rel_error: bad.max_rel_error,
            tolerance: summary.tolerance,
        });
    }
    Ok(summary)
}

// ---------------------------------------------------------------- ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<RunMetrics>,
    pub rows: Vec<AblationRow>,
    /// Diversity report of the first seed, per strategy.
    pub diversity: Vec<DiversityReport>,
}

pub const ABLATION_METRICS: [&str; 5] = ["accuracy", "auc", "inter_env_distance", "recovery", "dependency"];

fn metric_value(m: &RunMetrics, name: &str) -> f64 {
    match name {
        "accuracy" => m.accuracy,
        "auc" => m.auc,
        "inter_env_distance" => m.inter_env_distance,
        "recovery" => m.recovery,
        "dependency" => m.dependency,
        _ => f64::NAN,
    }
}

/// Aggregates per-seed runs into one row per (strategy, metric).
pub fn ablation_rows(runs: &[RunMetrics]) -> Result<Vec<AblationRow>> {
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.strategy.as_str()) {
            order.push(&r.strategy);
        }
    }
    let mut rows = Vec::new();
    for s in order {
        let mine: Vec<&RunMetrics> = runs.iter().filter(|r| r.strategy == s).collect();
        let seeds: Vec<u64> = mine.iter().map(|r| r.seed).collect();
        for metric in ABLATION_METRICS {
            let values = mine.iter().map(|r| metric_value(r, metric)).collect();
            rows.push(AblationRow::new(s, metric, seeds.clone(), values)?);
        }
    }
    Ok(rows)
}

/// Runs every strategy for every seed on a fixed dataset.
pub fn run_ablation(ds: &Dataset, strategies: &[Strategy], seeds: &[u64], cfg: &RunConfig) -> Result<AblationReport> {
    let mut runs = Vec::new();
    let mut diversity = Vec::new();
    for &strategy in strategies {
        for (i, &seed) in seeds.iter().enumerate() {
            let out = run_strategy(ds, strategy, cfg, seed)?;
            log::info!(
                "{strategy} seed {seed}: accuracy {:.4} distance {:.4} recovery {:.4}",
                out.metrics.accuracy,
                out.metrics.inter_env_distance,
                out.metrics.recovery
            );
            if i == 0 {
                diversity.push(out.diversity);
            }
            runs.push(out.metrics);
        }
    }
    let rows = ablation_rows(&runs)?;
    Ok(AblationReport { runs, rows, diversity })
}

/// Ablation over the configured seeds, written to `<out>/ablation`.
pub fn cmd_ablation(cfg: &RunConfig, strategies: &[Strategy]) -> Result<AblationReport> {
    let path = cfg.manifest_path();
    if !path.exists() {
        if cfg.manifest.is_some() {
            return Err(Error::MissingArtifact(path));
        }
        cmd_generate_data(cfg)?;
    }
    let ds = load_dataset(cfg)?;
    let report = run_ablation(&ds, strategies, &cfg.seeds, cfg)?;
    let dir = cfg.out.join("ablation");
    write(&dir.join("metrics.csv"), metrics_csv(&report.runs))?;
    let mut table = String::from("strategy,metric,mean,std,n\n");
    for r in &report.rows {
        table.push_str(&format!("{},{},{},{},{}\n", r.strategy, r.metric, r.mean, r.std, r.values.len()));
    }
    write(&dir.join("table.csv"), table)?;
    write_json(&dir.join("summary.json"), &report)?;
    write_run_manifest(cfg)?;
    Ok(report)
}

/// Mean and standard deviation of one metric for one strategy.
pub fn summarize(runs: &[RunMetrics], strategy: &str, metric: &str) -> (f64, f64) {
    let v: Vec<f64> = runs
        .iter()
        .filter(|r| r.strategy == strategy)
        .map(|r| metric_value(r, metric))
        .collect();
    mean_std(&v)
}
