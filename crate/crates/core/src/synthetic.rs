//! Spurious-motif graph generator with two-level ground-truth environments.
//!
//! Each graph joins a label motif (5-cycle for class 0, house for class 1)
//! with one of eight variant motifs: paths (ids 0-3) or cliques (ids 4-7)
//! of 3 to 6 nodes. The variant family agrees with the label's family with
//! probability `rho`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dataset, Graph};
use crate::rng::{RngStreams, STREAM_DATA};
use crate::tensor::Tensor;

pub const NUM_MOTIFS: usize = 8;
pub const NUM_FAMILIES: usize = 2;
pub const NUM_CLASSES: usize = 2;
/// Degrees 0..=10, with 10 meaning "10 or more".
pub const FEATURE_DIM: usize = 11;
const LABEL_MOTIF_NODES: usize = 5;
const NOISE_NODES: usize = 2;
const BRIDGES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub rho_train: f64,
    pub rho_test: f64,
    pub label_flip_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_train: 1000,
            n_val: 200,
            n_test: 500,
            rho_train: 0.9,
            rho_test: 0.1,
            label_flip_prob: 0.05,
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("split sizes must be positive".into()));
        }
        for (name, p) in [
            ("rho_train", self.rho_train),
            ("rho_test", self.rho_test),
            ("label_flip_prob", self.label_flip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Family of a motif id.
pub fn motif_family(motif: usize) -> usize {
    motif / 4
}

/// Number of nodes of a variant motif.
pub fn motif_size(motif: usize) -> usize {
    3 + motif % 4
}

fn label_motif_edges(label: usize) -> Vec<(usize, usize)> {
    if label == 0 {
        (0..5).map(|i| (i, (i + 1) % 5)).collect()
    } else {
        // square 0-1-2-3 with roof node 4 on edge 0-1
        vec![(0, 1), (1, 2), (2, 3), (3, 0), (4, 0), (4, 1)]
    }
}

fn variant_motif_edges(motif: usize, base: usize) -> Vec<(usize, usize)> {
    let n = motif_size(motif);
    if motif_family(motif) == 0 {
        (0..n - 1).map(|i| (base + i, base + i + 1)).collect()
    } else {
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (base + i, base + j)))
            .collect()
    }
}

/// One-hot degree features, capped at `FEATURE_DIM - 1`.
pub fn degree_features(num_nodes: usize, edges: &[(usize, usize)]) -> Tensor {
    let mut deg = vec![0usize; num_nodes];
    for &(i, j) in edges {
        deg[i] += 1;
        deg[j] += 1;
    }
    let mut x = Tensor::zeros(num_nodes, FEATURE_DIM);
    for (i, d) in deg.into_iter().enumerate() {
        x.set(i, d.min(FEATURE_DIM - 1), 1.0);
    }
    x
}

/// Draws one graph. `rho` is the probability that the variant family equals
/// the (pre-flip) label.
pub fn generate_graph<R: Rng + ?Sized>(rng: &mut R, id: String, rho: f64, flip: f64) -> Result<Graph> {
    let clean_label = rng.gen_range(0..NUM_CLASSES);
    let family = if rng.gen::<f64>() < rho { clean_label } else { 1 - clean_label };
    let motif = family * 4 + rng.gen_range(0..4);
    let vsize = motif_size(motif);
    let base = LABEL_MOTIF_NODES;
    let mut edges = label_motif_edges(clean_label);
    edges.extend(variant_motif_edges(motif, base));
    let mut bridges = Vec::with_capacity(BRIDGES);
    while bridges.len() < BRIDGES {
        let e = (rng.gen_range(0..base), base + rng.gen_range(0..vsize));
        if !bridges.contains(&e) {
            bridges.push(e);
        }
    }
    edges.extend(bridges);
    let core = base + vsize;
    for k in 0..NOISE_NODES {
        edges.push((rng.gen_range(0..core), core + k));
    }
    let num_nodes = core + NOISE_NODES;
    let label = if rng.gen::<f64>() < flip { 1 - clean_label } else { clean_label };
    let x = degree_features(num_nodes, &edges);
    Ok(Graph::new(id, x, edges, label)?.with_truth(Some(motif), Some(family)))
}

fn generate_split(streams: &RngStreams, split: &str, n: usize, rho: f64, flip: f64) -> Result<Vec<Graph>> {
    (0..n)
        .map(|i| {
            let mut rng = streams.substream(&format!("{STREAM_DATA}/{split}"), i as u64);
            generate_graph(&mut rng, format!("{split}-{i:05}"), rho, flip)
        })
        .collect()
}

/// Train and val use `rho_train`; test uses `rho_test`. Every graph has its
/// own derived stream, so a graph depends only on `(seed, split, index)`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let streams = RngStreams::new(config.seed);
    let flip = config.label_flip_prob;
    Ok(Dataset {
        train: generate_split(&streams, "train", config.n_train, config.rho_train, flip)?,
        val: generate_split(&streams, "val", config.n_val, config.rho_train, flip)?,
        test: generate_split(&streams, "test", config.n_test, config.rho_test, flip)?,
        num_classes: NUM_CLASSES,
        feature_dim: FEATURE_DIM,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::graphs_to_jsonl;

    fn cfg(n: usize, rho: f64, flip: f64, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_train: n,
            n_val: 10,
            n_test: 10,
            rho_train: rho,
            rho_test: rho,
            label_flip_prob: flip,
            seed,
        }
    }

    fn connected_ignoring_noise(g: &Graph) -> bool {
        let core = g.num_nodes - NOISE_NODES;
        let mut seen = vec![false; core];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &(i, j) in g.edges() {
                for (a, b) in [(i, j), (j, i)] {
                    if a == u && b < core && !seen[b] {
                        seen[b] = true;
                        stack.push(b);
                    }
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    #[test]
    fn full_correlation_puts_cliques_on_positive_graphs() {
        let ds = generate_synthetic(&cfg(300, 1.0, 0.0, 4)).unwrap();
        for g in &ds.train {
            assert_eq!(g.true_family, Some(g.label));
        }
        assert!(ds.train.iter().any(|g| g.label == 1));
    }

    #[test]
    fn half_correlation_is_close_to_independent() {
        let ds = generate_synthetic(&cfg(2000, 0.5, 0.0, 7)).unwrap();
        let n = ds.train.len() as f64;
        let p_y = ds.train.iter().filter(|g| g.label == 1).count() as f64 / n;
        let p_f = ds.train.iter().filter(|g| g.true_family == Some(1)).count() as f64 / n;
        let p_joint = ds.train.iter().filter(|g| g.label == 1 && g.true_family == Some(1)).count() as f64 / n;
        assert!((p_joint - p_y * p_f).abs() < 0.05, "{p_joint} vs {}", p_y * p_f);
        // P(family = label) should be near 1/2
        let agree = ds.train.iter().filter(|g| g.true_family == Some(g.label)).count() as f64 / n;
        assert!((agree - 0.5).abs() < 0.05, "{agree}");
    }

    #[test]
    fn truth_fields_and_structure() {
        let ds = generate_synthetic(&cfg(400, 0.9, 0.05, 2)).unwrap();
        let mut fam = [0usize; 2];
        for g in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            let env = g.true_env.unwrap();
            assert!(env < NUM_MOTIFS);
            assert_eq!(g.true_family, Some(env / 4));
            assert_eq!(g.num_nodes, LABEL_MOTIF_NODES + motif_size(env) + NOISE_NODES);
            assert!(connected_ignoring_noise(g), "{}", g.id);
            assert_eq!(g.feature_dim(), FEATURE_DIM);
            for r in 0..g.num_nodes {
                assert_eq!(g.node_features.row(r).iter().sum::<f64>(), 1.0);
            }
            fam[env / 4] += 1;
        }
        // labels are balanced, so families are too: 420 graphs, sd about 10
        assert!((fam[0] as i64 - fam[1] as i64).abs() < 80, "{fam:?}");
    }

    #[test]
    fn identical_config_gives_identical_bytes() {
        let c = cfg(50, 0.9, 0.05, 11);
        let a = generate_synthetic(&c).unwrap();
        let b = generate_synthetic(&c).unwrap();
        assert_eq!(graphs_to_jsonl(&a.train).unwrap(), graphs_to_jsonl(&b.train).unwrap());
        assert_eq!(graphs_to_jsonl(&a.test).unwrap(), graphs_to_jsonl(&b.test).unwrap());
        let other = generate_synthetic(&cfg(50, 0.9, 0.05, 12)).unwrap();
        assert_ne!(graphs_to_jsonl(&a.train).unwrap(), graphs_to_jsonl(&other.train).unwrap());
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(generate_synthetic(&cfg(10, 1.5, 0.0, 1)).is_err());
        assert!(generate_synthetic(&cfg(0, 0.5, 0.0, 1)).is_err());
    }
}
