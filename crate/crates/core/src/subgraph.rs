//! Hierarchical stochastic subgraph generation.
//!
//! At each level `k` a GIN refines the node states, an edge scorer assigns
//! every edge a selection probability, Gumbel noise turns it into a sharp
//! soft sample, and edges whose sample exceeds the threshold join the
//! cumulative variant mask. The mask only ever grows across levels.

use std::collections::HashSet;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::gnn::GinEncoder;
use crate::graph::Batch;
use crate::nn::Mlp;
use crate::params::ParamStore;
use crate::rng::gumbel;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Scores are clamped into `[S_CLAMP, 1 - S_CLAMP]` before taking logs.
pub const S_CLAMP: f64 = 1e-6;
/// Soft samples are kept inside `[P_FLOOR, 1 - P_FLOOR]` so they stay in (0, 1).
pub const P_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyConfig {
    /// Environment count per level; its length is the number of levels K.
    pub env_counts: Vec<usize>,
    pub threshold: f64,
    pub tau_gumbel: f64,
    pub tau_contrastive: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            env_counts: vec![8, 4, 2],
            threshold: 0.6,
            tau_gumbel: 0.05,
            tau_contrastive: 0.5,
            alpha: 1.0,
            beta: 1.0,
            lambda: 0.01,
        }
    }
}

impl HierarchyConfig {
    pub fn levels(&self) -> usize {
        self.env_counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.env_counts.is_empty() {
            return bad("at least one hierarchy level is required".into());
        }
        if self.env_counts.contains(&0) {
            return bad("environment counts must be positive".into());
        }
        if self.env_counts.windows(2).any(|w| w[1] >= w[0]) {
            return bad(format!("environment counts {:?} must strictly decrease", self.env_counts));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} not in (0, 1)", self.threshold));
        }
        if !(self.tau_gumbel > 0.0) || !(self.tau_contrastive > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if [self.alpha, self.beta, self.lambda].iter().any(|v| !(*v >= 0.0)) {
            return bad("loss weights must be non-negative".into());
        }
        Ok(())
    }
}

/// `s_ij = sigmoid(MLP([h_i + h_j, |h_i - h_j|]))` for every edge; returns an `E x 1` column.
pub fn score_edges(
    tape: &mut Tape,
    store: &ParamStore,
    scorer: &Mlp,
    nodes: Var,
    edges: &Rc<[(usize, usize)]>,
) -> Result<Var> {
    let left: Rc<[usize]> = edges.iter().map(|e| e.0).collect();
    let right: Rc<[usize]> = edges.iter().map(|e| e.1).collect();
    let hi = tape.gather_rows(nodes, left)?;
    let hj = tape.gather_rows(nodes, right)?;
    let sum = tape.add(hi, hj)?;
    let diff = tape.sub(hi, hj)?;
    let diff = tape.abs(diff)?;
    let feats = tape.concat(&[sum, diff])?;
    let logits = scorer.forward(tape, store, feats)?;
    tape.sigmoid(logits)
}

/// Like [`score_edges`] for an explicit list of pairs, each of which must be
/// an edge of the batch.
pub fn score_pairs(
    tape: &mut Tape,
    store: &ParamStore,
    scorer: &Mlp,
    nodes: Var,
    batch: &Batch,
    pairs: &[(usize, usize)],
) -> Result<Var> {
    let known: HashSet<(usize, usize)> = batch.edges.iter().copied().collect();
    for &(i, j) in pairs {
        if !known.contains(&(i.min(j), i.max(j))) {
            return Err(contract(format!("({i},{j}) is not an edge")));
        }
    }
    score_edges(tape, store, scorer, nodes, &pairs.to_vec().into())
}

/// Gumbel-softmax over `{select, drop}` with one fresh pair of draws per edge.
pub fn gumbel_select<R: Rng + ?Sized>(tape: &mut Tape, s: Var, tau: f64, rng: &mut R) -> Result<Var> {
    let n = tape.value(s).len();
    let noise: Vec<f64> = (0..n).map(|_| gumbel(rng) - gumbel(rng)).collect();
    gumbel_select_with_noise(tape, s, tau, &noise)
}

/// `p = exp((log s + g1)/tau) / (exp((log s + g1)/tau) + exp((log(1-s) + g0)/tau))`,
/// written as `sigmoid((log s - log(1-s) + g1 - g0) / tau)`. `noise[e] = g1 - g0`.
pub fn gumbel_select_with_noise(tape: &mut Tape, s: Var, tau: f64, noise: &[f64]) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(contract(format!("Gumbel temperature {tau} must be positive")));
    }
    let [r, c] = tape.value(s).shape();
    if noise.len() != r * c {
        return Err(contract("one noise value per score is required"));
    }
    let clamped = tape
        .value(s)
        .values()
        .iter()
        .filter(|&&v| !(S_CLAMP..=1.0 - S_CLAMP).contains(&v))
        .count();
    if clamped > 0 {
        log::warn!("gumbel_select: clamped {clamped} scores into [{S_CLAMP:e}, 1 - {S_CLAMP:e}]");
    }
    let s = tape.clamp(s, S_CLAMP, 1.0 - S_CLAMP)?;
    let log_s = tape.log(s)?;
    let one_minus = tape.affine(s, -1.0, 1.0)?;
    let log_1ms = tape.log(one_minus)?;
    let logit = tape.sub(log_s, log_1ms)?;
    let noisy = tape.add_const(logit, &Tensor::new(r, c, noise.to_vec())?)?;
    let scaled = tape.scale(noisy, 1.0 / tau)?;
    let p = tape.sigmoid(scaled)?;
    tape.clamp(p, P_FLOOR, 1.0 - P_FLOOR)
}

/// Cumulative edge-selection state over the edges of one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborMask {
    pub level: usize,
    pub selected: Vec<bool>,
}

impl NeighborMask {
    /// The level-0 mask: nothing selected.
    pub fn empty(num_edges: usize) -> Self {
        Self {
            level: 0,
            selected: vec![false; num_edges],
        }
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&b| b).count()
    }

    pub fn contains(&self, other: &NeighborMask) -> bool {
        self.selected.iter().zip(&other.selected).all(|(&a, &b)| a || !b)
    }

    /// Dense symmetric 0/1 matrix over the batch nodes.
    pub fn to_dense(&self, batch: &Batch) -> Tensor {
        let n = batch.num_nodes();
        let mut m = Tensor::zeros(n, n);
        for (&(i, j), &on) in batch.edges.iter().zip(&self.selected) {
            if on {
                m.set(i, j, 1.0);
                m.set(j, i, 1.0);
            }
        }
        m
    }
}

/// `N^k = N^{k-1} + 1{N^{k-1} = 0 and p > T}`. Also returns which edges are new.
pub fn update_mask(prev: &NeighborMask, p_hat: &[f64], threshold: f64) -> Result<(NeighborMask, Vec<bool>)> {
    if p_hat.len() != prev.selected.len() {
        return Err(contract("selection probabilities do not cover the mask"));
    }
    let newly: Vec<bool> = prev.selected.iter().zip(p_hat).map(|(&s, &p)| !s && p > threshold).collect();
    let selected = prev.selected.iter().zip(&newly).map(|(&s, &n)| s || n).collect();
    Ok((
        NeighborMask {
            level: prev.level + 1,
            selected,
        },
        newly,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphPair {
    pub variant: Tensor,
    pub invariant: Tensor,
}

/// `A_v = A * N` elementwise and `A_inv = A - A_v`.
pub fn split_adjacency(adjacency: &Tensor, mask: &Tensor) -> Result<SubgraphPair> {
    if adjacency.shape() != mask.shape() {
        return Err(contract("mask and adjacency shapes differ"));
    }
    let [r, c] = adjacency.shape();
    let variant: Vec<f64> = adjacency.values().iter().zip(mask.values()).map(|(a, m)| a * m).collect();
    let invariant = adjacency.values().iter().zip(&variant).map(|(a, v)| a - v).collect();
    Ok(SubgraphPair {
        variant: Tensor::new(r, c, variant)?,
        invariant: Tensor::new(r, c, invariant)?,
    })
}

/// How gradients reach the scorer through the binary mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskGradient {
    /// Forward uses the binary mask; backward substitutes the soft sample on newly selected edges.
    #[default]
    StraightThrough,
    /// Forward uses the soft sample itself on newly selected edges. Fully
    /// differentiable, used for finite-difference checks.
    Relaxed,
}

/// Encoder and edge scorer of one hierarchy level.
#[derive(Debug, Clone)]
pub struct SubgraphLevel {
    pub encoder: GinEncoder,
    pub scorer: Mlp,
}

impl SubgraphLevel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            encoder: GinEncoder::new(store, &format!("{name}.gnn"), in_dim, hidden, layers, rng)?,
            scorer: Mlp::new(store, &format!("{name}.scorer"), &[2 * hidden, hidden, 1], rng)?,
        })
    }
}

/// Everything produced at one level.
#[derive(Debug, Clone)]
pub struct LevelOutput {
    /// `h^{k-1}`, the input node states of this level.
    pub input: Var,
    /// `h^k`.
    pub nodes: Var,
    pub scores: Var,
    pub p_hat: Var,
    pub mask: NeighborMask,
    pub newly: Vec<bool>,
    /// `E x 1` edge weights of `A_v^k`.
    pub variant_weights: Var,
    /// `E x 1` edge weights of `A_inv^k`, equal to `1 - variant_weights`.
    pub invariant_weights: Var,
}

/// Runs all levels. With `rng = None` the Gumbel step is skipped and the
/// score itself is thresholded (deterministic inference).
pub fn generate_hierarchy<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    levels: &[SubgraphLevel],
    batch: &Batch,
    threshold: f64,
    tau: f64,
    mut rng: Option<&mut R>,
    mode: MaskGradient,
) -> Result<Vec<LevelOutput>> {
    let e = batch.num_edges();
    let ones = tape.constant(Tensor::filled(e, 1, 1.0));
    let mut h = tape.constant(batch.features.clone());
    let mut mask = NeighborMask::empty(e);
    let mut out = Vec::with_capacity(levels.len());
    for level in levels {
        let input = h;
        let nodes = level.encoder.forward(tape, store, input, &batch.edges, ones)?;
        let scores = score_edges(tape, store, &level.scorer, nodes, &batch.edges)?;
        let p_hat = match rng.as_deref_mut() {
            Some(r) => gumbel_select(tape, scores, tau, r)?,
            None => scores,
        };
        let (next, newly) = update_mask(&mask, tape.value(p_hat).values(), threshold)?;
        let variant_weights = match mode {
            MaskGradient::StraightThrough => {
                let hard: Vec<f64> = next.selected.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                tape.straight_through(p_hat, Tensor::new(e, 1, hard)?, newly.clone())?
            }
            MaskGradient::Relaxed => {
                let on_new: Vec<f64> = newly.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                let on_old: Vec<f64> = mask.selected.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                let sel = tape.constant(Tensor::new(e, 1, on_new)?);
                let soft = tape.mul(p_hat, sel)?;
                tape.add_const(soft, &Tensor::new(e, 1, on_old)?)?
            }
        };
        let invariant_weights = tape.affine(variant_weights, -1.0, 1.0)?;
        out.push(LevelOutput {
            input,
            nodes,
            scores,
            p_hat,
            mask: next.clone(),
            newly,
            variant_weights,
            invariant_weights,
        });
        mask = next;
        h = nodes;
    }
    Ok(out)
}

/// One line of the selected-edge diagnostic dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDumpRecord {
    pub id: String,
    pub k: usize,
    pub variant_edges: Vec<[usize; 2]>,
}

/// Per-graph, per-level selected edges in local node indices.
pub fn edge_dump(batch: &Batch, masks: &[NeighborMask]) -> Vec<EdgeDumpRecord> {
    let mut out = Vec::new();
    for (b, id) in batch.ids.iter().enumerate() {
        let base = batch.offsets[b];
        for m in masks {
            let variant_edges = (batch.edge_offsets[b]..batch.edge_offsets[b + 1])
                .filter(|&e| m.selected[e])
                .map(|e| [batch.edges[e].0 - base, batch.edges[e].1 - base])
                .collect();
            out.push(EdgeDumpRecord {
                id: id.clone(),
                k: m.level,
                variant_edges,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{batch_graphs, Graph};
    use crate::rng::{RngStreams, StreamRng};
    use crate::synthetic::generate_graph;

    fn scorer(store: &mut ParamStore, hidden: usize) -> Mlp {
        let mut rng = RngStreams::new(2).stream("init");
        Mlp::new(store, "s", &[2 * hidden, hidden, 1], &mut rng).unwrap()
    }

    #[test]
    fn zero_scorer_gives_half() {
        let mut store = ParamStore::new();
        let sc = scorer(&mut store, 3);
        for id in sc.params() {
            let [r, c] = store.value(id).shape();
            store.get_mut(id).value = Tensor::zeros(r, c);
        }
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(3, 3, (0..9).map(f64::from).collect()).unwrap());
        let s = score_edges(&mut tape, &store, &sc, h, &vec![(0, 1), (1, 2)].into()).unwrap();
        assert_eq!(tape.value(s).values(), &[0.5, 0.5]);
    }

    #[test]
    fn swapping_endpoints_is_bit_identical() {
        let mut store = ParamStore::new();
        let sc = scorer(&mut store, 4);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(2, 4, vec![0.3, -1.2, 0.7, 2.0, -0.4, 0.9, 0.1, -3.0]).unwrap());
        let a = score_edges(&mut tape, &store, &sc, h, &vec![(0, 1)].into()).unwrap();
        let b = score_edges(&mut tape, &store, &sc, h, &vec![(1, 0)].into()).unwrap();
        assert_eq!(tape.value(a).item().to_bits(), tape.value(b).item().to_bits());
    }

    #[test]
    fn single_layer_scorer_by_hand() {
        // features [h_i + h_j, |h_i - h_j|] = [3, 1]; s = sigmoid(0.5*3 - 2*1 + 0.1)
        let mut store = ParamStore::new();
        let mut rng = RngStreams::new(0).stream("init");
        let sc = Mlp::new(&mut store, "s", &[2, 1], &mut rng).unwrap();
        store.get_mut(sc.layers[0].weight).value = Tensor::new(2, 1, vec![0.5, -2.0]).unwrap();
        store.get_mut(sc.layers[0].bias).value = Tensor::scalar(0.1);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(2, 1, vec![1.0, 2.0]).unwrap());
        let s = score_edges(&mut tape, &store, &sc, h, &vec![(0, 1)].into()).unwrap();
        let expected = 1.0 / (1.0 + (-(1.5f64 - 2.0 + 0.1)).exp());
        assert!((tape.value(s).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn scoring_a_non_edge_is_a_contract_error() {
        let mut store = ParamStore::new();
        let sc = scorer(&mut store, 1);
        let g = Graph::new("g", Tensor::zeros(3, 1), [(0, 1)], 0).unwrap();
        let b = batch_graphs([&g]).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(b.features.clone());
        assert!(score_pairs(&mut tape, &store, &sc, h, &b, &[(1, 0)]).is_ok());
        assert!(matches!(
            score_pairs(&mut tape, &store, &sc, h, &b, &[(0, 2)]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn equal_noise_at_half_gives_half() {
        for tau in [0.05, 1.0, 7.0] {
            let mut tape = Tape::new();
            let s = tape.constant(Tensor::scalar(0.5));
            let p = gumbel_select_with_noise(&mut tape, s, tau, &[0.0]).unwrap();
            assert_eq!(tape.value(p).item(), 0.5);
        }
    }

    #[test]
    fn extreme_scores_are_clamped() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(2, 1, vec![0.0, 1.0]).unwrap());
        let p = gumbel_select_with_noise(&mut tape, s, 0.05, &[0.0, 0.0]).unwrap();
        let v = tape.value(p).values();
        assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn mask_update_rules() {
        let prev = NeighborMask::empty(1);
        let (m, newly) = update_mask(&prev, &[0.9], 0.6).unwrap();
        assert_eq!((m.selected[0], newly[0]), (true, true));
        let (m2, newly2) = update_mask(&m, &[0.1], 0.6).unwrap();
        assert_eq!((m2.selected[0], newly2[0]), (true, false));
        let (m3, _) = update_mask(&prev, &[0.6], 0.6).unwrap();
        assert!(!m3.selected[0]);
    }

    #[test]
    fn split_extremes_and_partition() {
        let a = Tensor::new(3, 3, vec![0., 1., 1., 1., 0., 0., 1., 0., 0.]).unwrap();
        let all = split_adjacency(&a, &Tensor::filled(3, 3, 1.0)).unwrap();
        assert_eq!((all.variant.clone(), all.invariant), (a.clone(), Tensor::zeros(3, 3)));
        let none = split_adjacency(&a, &Tensor::zeros(3, 3)).unwrap();
        assert_eq!((none.variant, none.invariant), (Tensor::zeros(3, 3), a.clone()));
    }

    fn setup(levels: usize, seed: u64) -> (ParamStore, Vec<SubgraphLevel>) {
        let mut store = ParamStore::new();
        let mut rng = RngStreams::new(seed).stream("init");
        let lv = (0..levels)
            .map(|k| SubgraphLevel::new(&mut store, &format!("l{k}"), if k == 0 { 11 } else { 8 }, 8, 1, &mut rng).unwrap())
            .collect();
        (store, lv)
    }

    fn batch(seed: u64, n: usize) -> Batch {
        let gs: Vec<Graph> = (0..n)
            .map(|i| generate_graph(&mut RngStreams::new(seed).substream("g", i as u64), format!("g{i}"), 0.5, 0.0).unwrap())
            .collect();
        batch_graphs(&gs).unwrap()
    }

    #[test]
    fn hierarchy_masks_are_monotone_and_partition_holds() {
        let (store, levels) = setup(3, 4);
        let mut total_counts = vec![0usize; 3];
        for trial in 0..100 {
            let b = batch(trial, 1);
            let mut tape = Tape::new();
            let mut g: StreamRng = RngStreams::new(trial).stream("gumbel");
            // a low threshold makes selections common enough to exercise growth
            let out = generate_hierarchy(&mut tape, &store, &levels, &b, 0.3, 0.05, Some(&mut g), MaskGradient::StraightThrough).unwrap();
            let a = b.block_adjacency();
            for k in 0..out.len() {
                if k > 0 {
                    assert!(out[k].mask.contains(&out[k - 1].mask));
                }
                total_counts[k] += out[k].mask.count();
                let pair = split_adjacency(&a, &out[k].mask.to_dense(&b)).unwrap();
                let sum: Vec<f64> = pair.variant.values().iter().zip(pair.invariant.values()).map(|(x, y)| x + y).collect();
                assert_eq!(sum.as_slice(), a.values());
                let vw = tape.value(out[k].variant_weights).values();
                let iw = tape.value(out[k].invariant_weights).values();
                for (e, &sel) in out[k].mask.selected.iter().enumerate() {
                    assert_eq!(vw[e], if sel { 1.0 } else { 0.0 });
                    assert_eq!(vw[e] + iw[e], 1.0);
                }
            }
        }
        assert!(total_counts.windows(2).all(|w| w[0] <= w[1]), "{total_counts:?}");
    }

    #[test]
    fn single_level_is_flat_extraction() {
        let (store, levels) = setup(1, 4);
        let b = batch(3, 2);
        let mut tape = Tape::new();
        let out = generate_hierarchy::<StreamRng>(&mut tape, &store, &levels, &b, 0.5, 0.05, None, MaskGradient::StraightThrough).unwrap();
        assert_eq!(out.len(), 1);
        let s = tape.value(out[0].scores).values().to_vec();
        let expected: Vec<bool> = s.iter().map(|&v| v > 0.5).collect();
        assert_eq!(out[0].mask.selected, expected);
    }

    #[test]
    fn scorer_receives_gradient_when_edges_are_newly_selected() {
        let (mut store, levels) = setup(2, 8);
        let b = batch(5, 3);
        let mut tape = Tape::new();
        let mut g = RngStreams::new(1).stream("gumbel");
        let out = generate_hierarchy(&mut tape, &store, &levels, &b, 0.3, 0.5, Some(&mut g), MaskGradient::StraightThrough).unwrap();
        let any_new = out.iter().any(|o| o.newly.iter().any(|&n| n));
        assert!(any_new);
        let mut parts = Vec::new();
        for o in &out {
            parts.push(tape.sum(o.variant_weights).unwrap());
        }
        let mut loss = parts[0];
        for &p in &parts[1..] {
            loss = tape.add(loss, p).unwrap();
        }
        tape.backward_into(loss, &mut store).unwrap();
        let grad_norm: f64 = levels
            .iter()
            .flat_map(|l| l.scorer.params())
            .filter_map(|id| store.get(id).grad.as_ref())
            .flat_map(|g| g.values().iter().map(|v| v * v))
            .sum();
        assert!(grad_norm > 0.0);
    }

    #[test]
    fn edge_dump_uses_local_indices() {
        let g1 = Graph::new("a", Tensor::zeros(2, 1), [(0, 1)], 0).unwrap();
        let g2 = Graph::new("b", Tensor::zeros(3, 1), [(0, 1), (1, 2)], 0).unwrap();
        let b = batch_graphs([&g1, &g2]).unwrap();
        let m = NeighborMask {
            level: 1,
            selected: vec![false, false, true],
        };
        let d = edge_dump(&b, &[m]);
        assert_eq!(d[0].variant_edges, Vec::<[usize; 2]>::new());
        assert_eq!(d[1].variant_edges, vec![[1, 2]]);
    }

    #[test]
    fn config_validation() {
        assert!(HierarchyConfig::default().validate().is_ok());
        let mut c = HierarchyConfig::default();
        c.env_counts = vec![4, 4];
        assert!(c.validate().is_err());
        c.env_counts = vec![2];
        c.threshold = 1.0;
        assert!(c.validate().is_err());
    }
}
