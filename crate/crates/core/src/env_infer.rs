//! Stage one: hierarchical environment inference.
//!
//! For every level the variant subgraph is encoded into `z_v`, the
//! invariant remainder into `z_inv`. An environment classifier reads
//! `[z_v, onehot(y)]`. The level loss combines a confidence term on the
//! posterior (`L_ED`), a contrastive term pulling together variant
//! embeddings that share an inferred environment at this or any earlier
//! level, and a contrastive term pulling together invariant embeddings that
//! share a label.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::gnn::{Head, ProjectionHeads};
use crate::graph::{batch_graphs, Batch, Graph};
use crate::nn::Mlp;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::rng::{permutation, RngStreams, StreamRng, STREAM_GUMBEL, STREAM_INIT, STREAM_SHUFFLE};
use crate::subgraph::{edge_dump, generate_hierarchy, EdgeDumpRecord, HierarchyConfig, MaskGradient, NeighborMask, SubgraphLevel};
use crate::tape::{softmax_in_place, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub hierarchy: HierarchyConfig,
    pub hidden: usize,
    pub proj: usize,
    pub layers: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Weight of the batch assignment-entropy bonus; 0 disables it.
    pub collapse_guard: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            hierarchy: HierarchyConfig::default(),
            hidden: 32,
            proj: 16,
            layers: 1,
            lr: 1e-3,
            batch_size: 32,
            epochs: 100,
            patience: 20,
            collapse_guard: 0.0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        self.hierarchy.validate()?;
        if self.hidden == 0 || self.proj == 0 || self.layers == 0 || self.batch_size == 0 {
            return Err(Error::Config("stage-1 sizes must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.collapse_guard >= 0.0) {
            return Err(Error::Config("stage-1 lr must be positive, collapse_guard non-negative".into()));
        }
        Ok(())
    }
}

/// Subgraph generators, projection heads and environment classifiers of every level.
#[derive(Debug, Clone)]
pub struct Stage1Model {
    pub levels: Vec<SubgraphLevel>,
    pub heads: Vec<ProjectionHeads>,
    pub env_classifiers: Vec<Mlp>,
    pub env_counts: Vec<usize>,
    pub num_classes: usize,
}

impl Stage1Model {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        feature_dim: usize,
        num_classes: usize,
        cfg: &Stage1Config,
        rng: &mut R,
    ) -> Result<Self> {
        let h = cfg.hidden;
        let mut levels = Vec::new();
        let mut heads = Vec::new();
        let mut env_classifiers = Vec::new();
        for (k, &e) in cfg.hierarchy.env_counts.iter().enumerate() {
            let name = format!("stage1.level{}", k + 1);
            let in_dim = if k == 0 { feature_dim } else { h };
            levels.push(SubgraphLevel::new(store, &name, in_dim, h, cfg.layers, rng)?);
            heads.push(ProjectionHeads::new(store, &format!("{name}.proj"), h, cfg.proj, rng)?);
            env_classifiers.push(Mlp::new(store, &format!("{name}.env"), &[cfg.proj + num_classes, h, e], rng)?);
        }
        Ok(Self {
            levels,
            heads,
            env_classifiers,
            env_counts: cfg.hierarchy.env_counts.clone(),
            num_classes,
        })
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(contract(format!("label {y} outside {classes} classes")));
        }
        t.set(i, y, 1.0);
    }
    Ok(t)
}

/// Taped posterior at one level.
#[derive(Debug, Clone)]
pub struct EnvPosterior {
    pub logits: Var,
    pub log_posterior: Var,
    /// `B x E` softmax probabilities.
    pub posterior: Tensor,
    /// Argmax per row, lowest index on ties.
    pub hard: Vec<usize>,
}

/// Softmax over `f([z_v, onehot(y)])`.
pub fn env_posterior(
    tape: &mut Tape,
    store: &ParamStore,
    classifier: &Mlp,
    z_v: Var,
    labels: &[usize],
    num_classes: usize,
) -> Result<EnvPosterior> {
    if classifier.out_dim() < 2 {
        return Err(contract(format!("{} environments; at least 2 are required", classifier.out_dim())));
    }
    let y = tape.constant(one_hot(labels, num_classes)?);
    let input = tape.concat(&[z_v, y])?;
    let logits = classifier.forward(tape, store, input)?;
    let log_posterior = tape.log_softmax(logits)?;
    let lv = tape.value(logits);
    let [b, e] = lv.shape();
    let mut posterior = lv.clone();
    let mut hard = Vec::with_capacity(b);
    for r in 0..b {
        let row = &mut posterior.values_mut()[r * e..(r + 1) * e];
        softmax_in_place(row);
        hard.push(argmax(lv.row(r)));
    }
    Ok(EnvPosterior {
        logits,
        log_posterior,
        posterior,
        hard,
    })
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// `-(1/B) sum_i max_e log P(e | x_i, y_i)` from a `B x E` log-posterior.
pub fn loss_ed(tape: &mut Tape, log_posterior: Var) -> Result<Var> {
    let m = tape.max_rows(log_posterior)?;
    let mean = tape.mean(m)?;
    tape.scale(mean, -1.0)
}

/// Plain-value form of [`loss_ed`] over posterior rows.
pub fn loss_ed_value(posteriors: &[Vec<f64>]) -> f64 {
    let total: f64 = posteriors
        .iter()
        .map(|p| p.iter().copied().fold(f64::NEG_INFINITY, f64::max).ln())
        .sum();
    -total / posteriors.len() as f64
}

/// Per-anchor positive index sets within one batch. Anchors never appear
/// in their own set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveSets {
    pub sets: Vec<BTreeSet<usize>>,
}

impl PositiveSets {
    pub fn empty(n: usize) -> Self {
        Self {
            sets: vec![BTreeSet::new(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn contains(&self, other: &PositiveSets) -> bool {
        self.sets.iter().zip(&other.sets).all(|(a, b)| b.is_subset(a))
    }
}

fn same_value_sets(values: &[usize]) -> PositiveSets {
    let sets = (0..values.len())
        .map(|a| (0..values.len()).filter(|&i| i != a && values[i] == values[a]).collect())
        .collect();
    PositiveSets { sets }
}

/// Positives at level k: the level k-1 set plus every other batch member
/// with the same level-k environment.
pub fn build_env_neighborhood(envs: &[usize], prev: Option<&PositiveSets>) -> Result<PositiveSets> {
    let mut cur = same_value_sets(envs);
    if let Some(p) = prev {
        if p.len() != envs.len() {
            return Err(contract("previous neighborhood covers a different batch"));
        }
        for (s, ps) in cur.sets.iter_mut().zip(&p.sets) {
            s.extend(ps.iter().copied());
        }
    }
    Ok(cur)
}

/// Other batch members sharing the anchor's label.
pub fn build_label_neighborhood(labels: &[usize]) -> PositiveSets {
    same_value_sets(labels)
}

/// Multi-positive InfoNCE for a single anchor on plain vectors:
/// mean over positives of `-log(exp(z.p/tau) / sum_n exp(z.n/tau))`.
/// An empty positive set gives 0.
pub fn info_nce(anchor: &[f64], positives: &[&[f64]], candidates: &[&[f64]], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(contract("contrastive temperature must be positive"));
    }
    if positives.is_empty() {
        return Ok(0.0);
    }
    if candidates.is_empty() {
        return Err(contract("InfoNCE needs at least one candidate"));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau;
    let lse = crate::tape::log_sum_exp(candidates.iter().map(|c| dot(anchor, c)));
    let total: f64 = positives.iter().map(|p| lse - dot(anchor, p)).sum();
    Ok(total / positives.len() as f64)
}

/// Batch InfoNCE over rows of `z` (unit vectors). Candidates of anchor `i`
/// are all other rows; anchors with no positives are left out of the mean.
pub fn info_nce_batch(tape: &mut Tape, z: Var, positives: &PositiveSets, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(contract("contrastive temperature must be positive"));
    }
    let b = tape.value(z).rows();
    if positives.len() != b {
        return Err(contract("positive sets do not match the batch"));
    }
    let active = positives.sets.iter().filter(|s| !s.is_empty()).count();
    if active == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    let sim = tape.scale(sim, 1.0 / tau)?;
    let mask: Rc<[bool]> = (0..b * b).map(|k| k / b != k % b).collect();
    let log_p = tape.masked_log_softmax(sim, mask)?;
    let mut weights = vec![0.0; b * b];
    for (i, s) in positives.sets.iter().enumerate() {
        for &p in s {
            weights[i * b + p] = -1.0 / (s.len() as f64 * active as f64);
        }
    }
    tape.weighted_sum(log_p, weights.into())
}

/// InfoNCE of variant embeddings with environment positives.
pub fn loss_envcon(tape: &mut Tape, z_v: Var, env_sets: &PositiveSets, tau: f64) -> Result<Var> {
    info_nce_batch(tape, z_v, env_sets, tau)
}

/// InfoNCE of invariant embeddings with label positives.
pub fn loss_labelcon(tape: &mut Tape, z_inv: Var, label_sets: &PositiveSets, tau: f64) -> Result<Var> {
    info_nce_batch(tape, z_inv, label_sets, tau)
}

/// `L_ED + alpha * L_EnvCon + beta * L_LabelCon`.
pub fn loss_hier(tape: &mut Tape, ed: Var, envcon: Var, labelcon: Var, alpha: f64, beta: f64) -> Result<Var> {
    let a = tape.scale(envcon, alpha)?;
    let b = tape.scale(labelcon, beta)?;
    let s = tape.add(ed, a)?;
    tape.add(s, b)
}

/// Sum of the per-level losses.
pub fn loss_hei(tape: &mut Tape, levels: &[Var]) -> Result<Var> {
    let (&first, rest) = levels.split_first().ok_or_else(|| contract("no hierarchy levels"))?;
    rest.iter().try_fold(first, |acc, &l| tape.add(acc, l))
}

/// Negative entropy of the batch-mean posterior; adding `w` times this to
/// the loss rewards spreading the batch over environments.
fn negative_assignment_entropy(tape: &mut Tape, logits: Var) -> Result<Var> {
    let b = tape.value(logits).rows();
    let post = tape.softmax(logits)?;
    let avg = tape.constant(Tensor::filled(1, b, 1.0 / b as f64));
    let mean = tape.matmul(avg, post)?;
    let safe = tape.clamp(mean, 1e-12, 1.0)?;
    let logm = tape.log(safe)?;
    let plogp = tape.mul(mean, logm)?;
    tape.sum(plogp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelLosses {
    pub ed: f64,
    pub envcon: f64,
    pub labelcon: f64,
    pub hier: f64,
}

/// Result of one taped stage-1 pass over a batch.
#[derive(Debug, Clone)]
pub struct Stage1Pass {
    pub total: Var,
    /// Per-level loss terms, in level order.
    pub level_vars: Vec<[Var; 4]>,
    pub losses: Vec<LevelLosses>,
    pub posteriors: Vec<EnvPosterior>,
    pub env_sets: Vec<PositiveSets>,
    pub masks: Vec<NeighborMask>,
}

/// Full stage-1 forward pass. `rng = None` runs deterministic inference.
pub fn stage1_forward(
    tape: &mut Tape,
    store: &ParamStore,
    model: &Stage1Model,
    batch: &Batch,
    cfg: &Stage1Config,
    rng: Option<&mut StreamRng>,
    mode: MaskGradient,
) -> Result<Stage1Pass> {
    let hc = &cfg.hierarchy;
    let levels = generate_hierarchy(tape, store, &model.levels, batch, hc.threshold, hc.tau_gumbel, rng, mode)?;
    let label_sets = build_label_neighborhood(&batch.labels);
    let mut prev: Option<PositiveSets> = None;
    let mut out = Stage1Pass {
        total: tape.constant(Tensor::scalar(0.0)),
        level_vars: Vec::new(),
        losses: Vec::new(),
        posteriors: Vec::new(),
        env_sets: Vec::new(),
        masks: Vec::new(),
    };
    let mut hier_vars = Vec::new();
    for (k, lv) in levels.iter().enumerate() {
        let enc = &model.levels[k].encoder;
        let nodes_v = enc.forward(tape, store, lv.input, &batch.edges, lv.variant_weights)?;
        let g_v = tape.segment_mean(nodes_v, batch.offsets.clone())?;
        let nodes_i = enc.forward(tape, store, lv.input, &batch.edges, lv.invariant_weights)?;
        let g_i = tape.segment_mean(nodes_i, batch.offsets.clone())?;
        let z_v = model.heads[k].project(tape, store, g_v, Head::Variant)?;
        let z_inv = model.heads[k].project(tape, store, g_i, Head::Invariant)?;
        let post = env_posterior(tape, store, &model.env_classifiers[k], z_v, &batch.labels, model.num_classes)?;
        let ed = loss_ed(tape, post.log_posterior)?;
        let env_sets = build_env_neighborhood(&post.hard, prev.as_ref())?;
        let envcon = loss_envcon(tape, z_v, &env_sets, hc.tau_contrastive)?;
        let labelcon = loss_labelcon(tape, z_inv, &label_sets, hc.tau_contrastive)?;
        let mut hier = loss_hier(tape, ed, envcon, labelcon, hc.alpha, hc.beta)?;
        if cfg.collapse_guard > 0.0 {
            let neg_h = negative_assignment_entropy(tape, post.logits)?;
            let guard = tape.scale(neg_h, cfg.collapse_guard)?;
            hier = tape.add(hier, guard)?;
        }
        out.losses.push(LevelLosses {
            ed: tape.scalar(ed),
            envcon: tape.scalar(envcon),
            labelcon: tape.scalar(labelcon),
            hier: tape.scalar(hier),
        });
        out.level_vars.push([ed, envcon, labelcon, hier]);
        hier_vars.push(hier);
        out.posteriors.push(post);
        out.env_sets.push(env_sets.clone());
        out.masks.push(lv.mask.clone());
        prev = Some(env_sets);
    }
    out.total = loss_hei(tape, &hier_vars)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedStage1 {
    pub model: Stage1Model,
    pub store: ParamStore,
    pub config: Stage1Config,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainedStage1 {
    /// Rebuilds the model skeleton from `config` and loads saved parameters.
    pub fn from_store(
        saved: &ParamStore,
        feature_dim: usize,
        num_classes: usize,
        config: &Stage1Config,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = RngStreams::new(0).stream(STREAM_INIT);
        let model = Stage1Model::new(&mut store, feature_dim, num_classes, config, &mut rng)?;
        store.copy_values_from(saved)?;
        Ok(Self {
            model,
            store,
            config: config.clone(),
            history: Vec::new(),
            best_epoch: 0,
        })
    }
}

fn chunks<'a>(graphs: &'a [Graph], order: &[usize], size: usize) -> Vec<Vec<&'a Graph>> {
    order.chunks(size).map(|c| c.iter().map(|&i| &graphs[i]).collect()).collect()
}

/// Mean deterministic `L_HEI` over fixed, in-order batches.
pub fn evaluate_stage1(trained: &TrainedStage1, graphs: &[Graph]) -> Result<f64> {
    evaluate_with(&trained.store, &trained.model, &trained.config, graphs)
}

fn evaluate_with(store: &ParamStore, model: &Stage1Model, cfg: &Stage1Config, graphs: &[Graph]) -> Result<f64> {
    if graphs.is_empty() {
        return Ok(0.0);
    }
    let order: Vec<usize> = (0..graphs.len()).collect();
    let mut total = 0.0;
    let mut count = 0.0;
    for chunk in chunks(graphs, &order, cfg.batch_size) {
        let batch = batch_graphs(chunk.iter().copied())?;
        let mut tape = Tape::new();
        let pass = stage1_forward(&mut tape, store, model, &batch, cfg, None, MaskGradient::StraightThrough)?;
        total += tape.scalar(pass.total) * batch.len() as f64;
        count += batch.len() as f64;
    }
    Ok(total / count)
}

/// Trains all stage-1 modules jointly with Adam, early-stopping on the
/// deterministic validation `L_HEI`. Returns the best-validation parameters.
pub fn train_stage1(
    train: &[Graph],
    val: &[Graph],
    num_classes: usize,
    cfg: &Stage1Config,
    streams: &RngStreams,
) -> Result<TrainedStage1> {
    cfg.validate()?;
    let first = train.first().ok_or_else(|| contract("empty training set"))?;
    let feature_dim = first.feature_dim();
    let mut store = ParamStore::new();
    let mut init = streams.stream(&format!("{STREAM_INIT}/stage1"));
    let model = Stage1Model::new(&mut store, feature_dim, num_classes, cfg, &mut init)?;
    let mut adam = Adam::new(
        &store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut gumbel_rng = streams.stream(&format!("{STREAM_GUMBEL}/stage1"));
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, store.clone());
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let mut shuffle = streams.substream(&format!("{STREAM_SHUFFLE}/stage1"), epoch as u64);
        let order = permutation(&mut shuffle, train.len());
        let mut sum = 0.0;
        let mut seen = 0.0;
        for chunk in chunks(train, &order, cfg.batch_size) {
            let batch = batch_graphs(chunk.iter().copied())?;
            let mut tape = Tape::new();
            let pass = stage1_forward(
                &mut tape,
                &store,
                &model,
                &batch,
                cfg,
                Some(&mut gumbel_rng),
                MaskGradient::StraightThrough,
            )
            .map_err(|e| diverged(epoch, &history, e))?;
            let loss = tape.scalar(pass.total);
            sum += loss * batch.len() as f64;
            seen += batch.len() as f64;
            tape.backward_into(pass.total, &mut store).map_err(|e| diverged(epoch, &history, e))?;
            adam.step(&mut store)?;
        }
        let val_loss = if val.is_empty() {
            sum / seen
        } else {
            evaluate_with(&store, &model, cfg, val).map_err(|e| diverged(epoch, &history, e))?
        };
        history.push(EpochRecord {
            epoch,
            train_loss: sum / seen,
            val_loss,
        });
        log::debug!("stage1 epoch {epoch}: train {:.5} val {:.5}", sum / seen, val_loss);
        if val_loss < best.0 {
            best = (val_loss, epoch, store.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainedStage1 {
        model,
        store: best.2,
        config: cfg.clone(),
        history,
        best_epoch: best.1,
    })
}

pub(crate) fn diverged(epoch: usize, history: &[EpochRecord], cause: Error) -> Error {
    match cause {
        Error::NumericDomain { .. } | Error::Dimension { .. } => {
            let tail: Vec<&EpochRecord> = history.iter().rev().take(5).collect();
            Error::Diverged {
                epoch,
                detail: format!(
                    "{cause}; recent epochs {}",
                    serde_json::to_string(&tail).unwrap_or_default()
                ),
            }
        }
        other => other,
    }
}

/// One line of the environment-assignment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvRecord {
    pub id: String,
    pub env: usize,
    pub posterior: Vec<f64>,
    pub hierarchy: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvAssignment {
    pub records: Vec<EnvRecord>,
    /// Hard labels at every level, `levels[k][i]` for sample `i`.
    pub levels: Vec<Vec<usize>>,
}

impl EnvAssignment {
    pub fn envs(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.env).collect()
    }

    pub fn num_envs(&self) -> usize {
        self.records.iter().map(|r| r.env + 1).max().unwrap_or(0)
    }

    /// Assignment with one-hot posteriors from given labels (used for
    /// baselines that do not infer environments).
    pub fn from_labels(ids: &[String], envs: &[usize], num_envs: usize) -> Self {
        let records = ids
            .iter()
            .zip(envs)
            .map(|(id, &e)| {
                let mut posterior = vec![0.0; num_envs.max(e + 1)];
                posterior[e] = 1.0;
                EnvRecord {
                    id: id.clone(),
                    env: e,
                    posterior,
                    hierarchy: 1,
                }
            })
            .collect();
        Self {
            records,
            levels: vec![envs.to_vec()],
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: EnvRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            records.push(r);
        }
        let envs = records.iter().map(|r| r.env).collect();
        Ok(Self {
            records,
            levels: vec![envs],
        })
    }

    /// Environment of each graph, looked up by id.
    pub fn envs_for(&self, graphs: &[Graph]) -> Result<Vec<usize>> {
        let map: std::collections::HashMap<&str, usize> = self.records.iter().map(|r| (r.id.as_str(), r.env)).collect();
        graphs
            .iter()
            .map(|g| {
                map.get(g.id.as_str())
                    .copied()
                    .ok_or_else(|| contract(format!("no environment assigned to {}", g.id)))
            })
            .collect()
    }
}

/// Deterministic last-level environments for every graph.
pub fn assign_environments(graphs: &[Graph], trained: &TrainedStage1) -> Result<EnvAssignment> {
    Ok(infer(graphs, trained)?.0)
}

/// Assignment plus selected-edge diagnostics.
pub fn assign_with_dump(graphs: &[Graph], trained: &TrainedStage1) -> Result<(EnvAssignment, Vec<EdgeDumpRecord>)> {
    infer(graphs, trained)
}

fn infer(graphs: &[Graph], trained: &TrainedStage1) -> Result<(EnvAssignment, Vec<EdgeDumpRecord>)> {
    let k_last = trained.model.env_counts.len();
    let e_last = *trained.model.env_counts.last().ok_or_else(|| contract("model without levels"))?;
    let mut records = Vec::with_capacity(graphs.len());
    let mut levels = vec![Vec::with_capacity(graphs.len()); k_last];
    let mut dump = Vec::new();
    if e_last == 1 {
        for g in graphs {
            records.push(EnvRecord {
                id: g.id.clone(),
                env: 0,
                posterior: vec![1.0],
                hierarchy: k_last,
            });
            levels[k_last - 1].push(0);
        }
        return Ok((EnvAssignment { records, levels }, dump));
    }
    let order: Vec<usize> = (0..graphs.len()).collect();
    for chunk in chunks(graphs, &order, trained.config.batch_size) {
        let batch = batch_graphs(chunk.iter().copied())?;
        let mut tape = Tape::new();
        let pass = stage1_forward(
            &mut tape,
            &trained.store,
            &trained.model,
            &batch,
            &trained.config,
            None,
            MaskGradient::StraightThrough,
        )?;
        for (k, p) in pass.posteriors.iter().enumerate() {
            levels[k].extend_from_slice(&p.hard);
        }
        let last = pass.posteriors.last().expect("at least one level");
        for (i, id) in batch.ids.iter().enumerate() {
            records.push(EnvRecord {
                id: id.clone(),
                env: last.hard[i],
                posterior: last.posterior.row(i).to_vec(),
                hierarchy: k_last,
            });
        }
        dump.extend(edge_dump(&batch, &pass.masks));
    }
    Ok((EnvAssignment { records, levels }, dump))
}

/// Copies of `graphs` with the last-level variant edges removed.
pub fn invariant_subgraphs(graphs: &[Graph], trained: &TrainedStage1) -> Result<Vec<Graph>> {
    let (_, dump) = infer(graphs, trained)?;
    let k_last = trained.model.env_counts.len();
    let by_id: std::collections::HashMap<&str, &EdgeDumpRecord> =
        dump.iter().filter(|d| d.k == k_last).map(|d| (d.id.as_str(), d)).collect();
    graphs
        .iter()
        .map(|g| {
            let drop: BTreeSet<(usize, usize)> = by_id
                .get(g.id.as_str())
                .map(|d| d.variant_edges.iter().map(|e| (e[0], e[1])).collect())
                .unwrap_or_default();
            let kept = g.edges().iter().copied().filter(|e| !drop.contains(e));
            Ok(Graph::new(g.id.clone(), g.node_features.clone(), kept, g.label)?.with_truth(g.true_env, g.true_family))
        })
        .collect()
}
