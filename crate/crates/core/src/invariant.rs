//! Stage two: IRM-penalized graph classification on inferred environments.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env_infer::{diverged, one_hot, EpochRecord};
use crate::error::{contract, Error, Result};
use crate::gnn::{encode_graph, GinEncoder};
use crate::graph::{batch_graphs, Batch, Graph};
use crate::nn::Linear;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::rng::{permutation, RngStreams, StreamRng, STREAM_DROPOUT, STREAM_INIT, STREAM_SHUFFLE};
use crate::tape::{sigmoid, softmax_in_place, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub lambda: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            hidden: 32,
            layers: 3,
            dropout: 0.5,
            lr: 1e-3,
            batch_size: 32,
            epochs: 100,
            patience: 20,
            lambda: 0.01,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.batch_size == 0 {
            return Err(Error::Config("stage-2 sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.lr > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("stage-2 lr must be positive and lambda non-negative".into()));
        }
        Ok(())
    }
}

/// GIN encoder, mean readout, dropout and a linear head over the classes.
#[derive(Debug, Clone)]
pub struct InvariantClassifier {
    pub encoder: GinEncoder,
    pub head: Linear,
    pub dropout: f64,
    pub num_classes: usize,
}

impl InvariantClassifier {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        feature_dim: usize,
        num_classes: usize,
        cfg: &Stage2Config,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            encoder: GinEncoder::new(store, "stage2.gnn", feature_dim, cfg.hidden, cfg.layers, rng)?,
            head: Linear::new(store, "stage2.head", cfg.hidden, num_classes, rng)?,
            dropout: cfg.dropout,
            num_classes,
        })
    }

    /// `B x C` logits. Dropout is active only when `rng` is given.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch, rng: Option<&mut StreamRng>) -> Result<Var> {
        let (_, pooled) = encode_graph(tape, store, &self.encoder, batch, None, None)?;
        let pooled = tape.relu(pooled)?;
        let h = tape.dropout(pooled, 1.0 - self.dropout, rng)?;
        self.head.forward(tape, store, h)
    }
}

fn group_by_env(envs: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &e) in envs.iter().enumerate() {
        groups.entry(e).or_default().push(i);
    }
    groups
}

/// IRMv1 penalty: for each environment `e` present in the batch,
/// `(d/dw R^e(w * logits) at w = 1)^2` with `R^e` the mean cross-entropy,
/// summed over environments. The derivative has the closed form
/// `mean_i sum_c (softmax(z_i)_c - y_ic) z_ic`.
pub fn irm_penalty(tape: &mut Tape, logits: Var, labels: &[usize], envs: &[usize]) -> Result<Var> {
    let [b, c] = tape.value(logits).shape();
    if labels.len() != b || envs.len() != b {
        return Err(contract("labels and environments must cover the batch"));
    }
    let sm = tape.softmax(logits)?;
    let y = tape.constant(one_hot(labels, c)?);
    let diff = tape.sub(sm, y)?;
    let prod = tape.mul(diff, logits)?;
    let mut total: Option<Var> = None;
    for (_, members) in group_by_env(envs) {
        let mut w = vec![0.0; b * c];
        let inv = 1.0 / members.len() as f64;
        for &i in &members {
            w[i * c..(i + 1) * c].iter_mut().for_each(|x| *x = inv);
        }
        let g = tape.weighted_sum(prod, w.into())?;
        let sq = tape.mul(g, g)?;
        total = Some(match total {
            Some(t) => tape.add(t, sq)?,
            None => sq,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// Single-logit binary form: `sum_e (mean_{i in e} (sigmoid(z_i) - y_i) z_i)^2`.
pub fn irm_penalty_binary(z: &[f64], y: &[f64], envs: &[usize]) -> f64 {
    group_by_env(envs)
        .values()
        .map(|m| {
            let g = m.iter().map(|&i| (sigmoid(z[i]) - y[i]) * z[i]).sum::<f64>() / m.len() as f64;
            g * g
        })
        .sum()
}

/// Batch-mean cross-entropy.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let [b, c] = tape.value(logits).shape();
    let lp = tape.log_softmax(logits)?;
    let w: Vec<f64> = one_hot(labels, c)?.values().iter().map(|v| -v / b as f64).collect();
    tape.weighted_sum(lp, w.into())
}

/// Per-environment risks and penalties of one set of logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub envs: Vec<usize>,
    pub counts: Vec<usize>,
    pub risks: Vec<f64>,
    pub penalties: Vec<f64>,
}

pub fn risk_report(logits: &Tensor, labels: &[usize], envs: &[usize]) -> Result<RiskReport> {
    let [b, c] = logits.shape();
    if labels.len() != b || envs.len() != b {
        return Err(contract("labels and environments must cover the batch"));
    }
    let mut r = RiskReport {
        envs: vec![],
        counts: vec![],
        risks: vec![],
        penalties: vec![],
    };
    for (e, members) in group_by_env(envs) {
        let mut risk = 0.0;
        let mut grad = 0.0;
        for &i in &members {
            let mut p = logits.row(i).to_vec();
            softmax_in_place(&mut p);
            let lse = crate::tape::log_sum_exp(logits.row(i).iter().copied());
            risk += lse - logits.get(i, labels[i]);
            for k in 0..c {
                let yk = if k == labels[i] { 1.0 } else { 0.0 };
                grad += (p[k] - yk) * logits.get(i, k);
            }
        }
        let n = members.len() as f64;
        r.envs.push(e);
        r.counts.push(members.len());
        r.risks.push(risk / n);
        r.penalties.push((grad / n).powi(2));
    }
    Ok(r)
}

pub struct InvariantLoss {
    pub total: Var,
    pub cls: Var,
    pub penalty: Option<Var>,
}

/// `L_cls + lambda * penalty`. With `lambda = 0` the penalty is not built.
pub fn invariant_loss(tape: &mut Tape, logits: Var, labels: &[usize], envs: &[usize], lambda: f64) -> Result<InvariantLoss> {
    if !(lambda >= 0.0) {
        return Err(contract("lambda must be non-negative"));
    }
    let cls = cross_entropy(tape, logits, labels)?;
    if lambda == 0.0 {
        return Ok(InvariantLoss {
            total: cls,
            cls,
            penalty: None,
        });
    }
    let pen = irm_penalty(tape, logits, labels, envs)?;
    let scaled = tape.scale(pen, lambda)?;
    let total = tape.add(cls, scaled)?;
    Ok(InvariantLoss {
        total,
        cls,
        penalty: Some(pen),
    })
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub model: InvariantClassifier,
    pub store: ParamStore,
    pub config: Stage2Config,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

impl TrainedClassifier {
    pub fn from_store(saved: &ParamStore, feature_dim: usize, num_classes: usize, config: &Stage2Config) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = RngStreams::new(0).stream(STREAM_INIT);
        let model = InvariantClassifier::new(&mut store, feature_dim, num_classes, config, &mut rng)?;
        store.copy_values_from(saved)?;
        Ok(Self {
            model,
            store,
            config: config.clone(),
            history: Vec::new(),
            best_epoch: 0,
            best_val_accuracy: f64::NAN,
        })
    }
}

fn accuracy_of(store: &ParamStore, model: &InvariantClassifier, graphs: &[Graph], batch_size: usize) -> Result<f64> {
    let probs = predict_with(store, model, graphs, batch_size)?;
    let correct = probs
        .iter()
        .zip(graphs)
        .filter(|(p, g)| crate::env_infer::argmax(p) == g.label)
        .count();
    Ok(correct as f64 / graphs.len().max(1) as f64)
}

/// Adam on `L_inv`, early-stopping on validation accuracy; returns the
/// best-validation parameters. `envs[i]` is the environment of `train[i]`.
pub fn train_stage2(
    train: &[Graph],
    envs: &[usize],
    val: &[Graph],
    num_classes: usize,
    cfg: &Stage2Config,
    streams: &RngStreams,
) -> Result<TrainedClassifier> {
    cfg.validate()?;
    if envs.len() != train.len() {
        return Err(contract("environment assignments do not cover the training set"));
    }
    let first = train.first().ok_or_else(|| contract("empty training set"))?;
    let mut store = ParamStore::new();
    let mut init = streams.stream(&format!("{STREAM_INIT}/stage2"));
    let model = InvariantClassifier::new(&mut store, first.feature_dim(), num_classes, cfg, &mut init)?;
    let mut adam = Adam::new(
        &store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut drop_rng = streams.stream(&format!("{STREAM_DROPOUT}/stage2"));
    let monitor = if val.is_empty() { train } else { val };
    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, store.clone());
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let mut shuffle = streams.substream(&format!("{STREAM_SHUFFLE}/stage2"), epoch as u64);
        let order = permutation(&mut shuffle, train.len());
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = batch_graphs(chunk.iter().map(|&i| &train[i]))?;
            let batch_envs: Vec<usize> = chunk.iter().map(|&i| envs[i]).collect();
            let mut tape = Tape::new();
            let logits = model
                .forward(&mut tape, &store, &batch, Some(&mut drop_rng))
                .map_err(|e| diverged(epoch, &history, e))?;
            let loss = invariant_loss(&mut tape, logits, &batch.labels, &batch_envs, cfg.lambda)
                .map_err(|e| diverged(epoch, &history, e))?;
            sum += tape.scalar(loss.total) * chunk.len() as f64;
            tape.backward_into(loss.total, &mut store).map_err(|e| diverged(epoch, &history, e))?;
            adam.step(&mut store)?;
        }
        let acc = accuracy_of(&store, &model, monitor, cfg.batch_size)?;
        history.push(EpochRecord {
            epoch,
            train_loss: sum / train.len() as f64,
            val_loss: 1.0 - acc,
        });
        log::debug!("stage2 epoch {epoch}: loss {:.5} val acc {:.4}", sum / train.len() as f64, acc);
        if acc > best.0 {
            best = (acc, epoch, store.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainedClassifier {
        model,
        store: best.2,
        config: cfg.clone(),
        history,
        best_epoch: best.1,
        best_val_accuracy: best.0,
    })
}

fn predict_with(store: &ParamStore, model: &InvariantClassifier, graphs: &[Graph], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(batch_size.max(1)) {
        let batch = batch_graphs(chunk)?;
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, store, &batch, None)?;
        let lv = tape.value(logits);
        for r in 0..lv.rows() {
            let mut p = lv.row(r).to_vec();
            softmax_in_place(&mut p);
            out.push(p);
        }
    }
    Ok(out)
}

/// Class probabilities per graph, dropout off.
pub fn predict(classifier: &TrainedClassifier, graphs: &[Graph]) -> Result<Vec<Vec<f64>>> {
    predict_with(&classifier.store, &classifier.model, graphs, classifier.config.batch_size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub probs: Vec<f64>,
}

pub fn save_predictions(path: &Path, graphs: &[Graph], probs: &[Vec<f64>]) -> Result<()> {
    let mut out = Vec::new();
    for (g, p) in graphs.iter().zip(probs) {
        serde_json::to_writer(
            &mut out,
            &PredictionRecord {
                id: g.id.clone(),
                probs: p.clone(),
            },
        )?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
