//! GIN encoders, mean readout and the variant / invariant projection heads.

use rand::Rng;

use crate::error::{contract, Result};
use crate::graph::Batch;
use crate::nn::Mlp;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Guard used when normalizing projection outputs.
pub const NORM_EPS: f64 = 1e-12;

/// `h'_i = MLP((1 + eps) h_i + sum_j A_ij h_j)` with a two-layer MLP.
#[derive(Debug, Clone)]
pub struct GinLayer {
    pub eps: ParamId,
    pub mlp: Mlp,
}

impl GinLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let eps = store.insert(format!("{name}.eps"), Tensor::zeros(1, 1))?;
        let mlp = Mlp::new(store, &format!("{name}.mlp"), &[in_dim, hidden, hidden], rng)?;
        Ok(Self { eps, mlp })
    }

    /// `w` holds one weight per entry of `edges` (an `E x 1` column).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        edges: &std::rc::Rc<[(usize, usize)]>,
        w: Var,
    ) -> Result<Var> {
        if tape.value(h).cols() != self.mlp.in_dim() {
            return Err(contract(format!(
                "GIN layer expects width {}, got {}",
                self.mlp.in_dim(),
                tape.value(h).cols()
            )));
        }
        let eps = tape.param(store, self.eps);
        let scaled = tape.mul_scalar(h, eps)?;
        let self_term = tape.add(h, scaled)?;
        let neigh = tape.propagate(h, w, edges.clone())?;
        let agg = tape.add(self_term, neigh)?;
        self.mlp.forward(tape, store, agg)
    }
}

/// Stacked GIN layers with ReLU between layers.
#[derive(Debug, Clone)]
pub struct GinEncoder {
    pub layers: Vec<GinLayer>,
    pub hidden: usize,
}

impl GinEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(contract("encoder needs at least one layer"));
        }
        let layers = (0..num_layers)
            .map(|l| GinLayer::new(store, &format!("{name}.gin{l}"), if l == 0 { in_dim } else { hidden }, hidden, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, hidden })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        edges: &std::rc::Rc<[(usize, usize)]>,
        w: Var,
    ) -> Result<Var> {
        let mut h = h;
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 {
                h = tape.relu(h)?;
            }
            h = layer.forward(tape, store, h, edges, w)?;
        }
        Ok(h)
    }
}

/// Constant all-ones edge weights: the plain adjacency of `batch`.
pub fn full_adjacency(tape: &mut Tape, batch: &Batch) -> Var {
    tape.constant(Tensor::filled(batch.num_edges(), 1, 1.0))
}

/// Runs `encoder` over the batch and mean-pools per graph.
///
/// `input` defaults to the batch features; `adjacency` is an `E x 1` column
/// of per-edge weights (a masked adjacency) and defaults to all ones.
/// Returns `(node embeddings N x H, graph embeddings B x H)`.
pub fn encode_graph(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &GinEncoder,
    batch: &Batch,
    input: Option<Var>,
    adjacency: Option<Var>,
) -> Result<(Var, Var)> {
    let h = match input {
        Some(v) => {
            if tape.value(v).rows() != batch.num_nodes() {
                return Err(contract("input rows differ from batch node count"));
            }
            v
        }
        None => tape.constant(batch.features.clone()),
    };
    let w = match adjacency {
        Some(w) => {
            if tape.value(w).shape() != [batch.num_edges(), 1] {
                return Err(contract(format!(
                    "adjacency override {:?} does not match {} batch edges",
                    tape.value(w).shape(),
                    batch.num_edges()
                )));
            }
            w
        }
        None => full_adjacency(tape, batch),
    };
    let nodes = encoder.forward(tape, store, h, &batch.edges, w)?;
    let pooled = tape.segment_mean(nodes, batch.offsets.clone())?;
    Ok((nodes, pooled))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Variant,
    Invariant,
}

/// Two independent MLP heads followed by row-wise l2 normalization.
#[derive(Debug, Clone)]
pub struct ProjectionHeads {
    pub variant: Mlp,
    pub invariant: Mlp,
}

impl ProjectionHeads {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, hidden: usize, out: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            variant: Mlp::new(store, &format!("{name}.variant"), &[hidden, hidden, out], rng)?,
            invariant: Mlp::new(store, &format!("{name}.invariant"), &[hidden, hidden, out], rng)?,
        })
    }

    pub fn project(&self, tape: &mut Tape, store: &ParamStore, graph_emb: Var, head: Head) -> Result<Var> {
        let mlp = match head {
            Head::Variant => &self.variant,
            Head::Invariant => &self.invariant,
        };
        let z = mlp.forward(tape, store, graph_emb)?;
        tape.l2_normalize(z, NORM_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{batch_graphs, Graph};
    use crate::nn::Linear;
    use crate::rng::RngStreams;

    fn set(store: &mut ParamStore, id: ParamId, rows: usize, cols: usize, v: Vec<f64>) {
        store.get_mut(id).value = Tensor::new(rows, cols, v).unwrap();
    }

    fn set_linear(store: &mut ParamStore, l: &Linear, w: Vec<f64>, b: Vec<f64>) {
        set(store, l.weight, l.in_dim, l.out_dim, w);
        set(store, l.bias, 1, l.out_dim, b);
    }

    fn identity_layer(width: usize) -> (ParamStore, GinLayer) {
        let mut store = ParamStore::new();
        let mut rng = RngStreams::new(0).stream("init");
        let layer = GinLayer::new(&mut store, "g", width, width, &mut rng).unwrap();
        let eye = Tensor::identity(width).into_values();
        for l in &layer.mlp.layers {
            set_linear(&mut store, l, eye.clone(), vec![0.0; width]);
        }
        (store, layer)
    }

    fn run_layer(store: &ParamStore, layer: &GinLayer, g: &Graph) -> Tensor {
        let b = batch_graphs([g]).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(b.features.clone());
        let w = full_adjacency(&mut tape, &b);
        let out = layer.forward(&mut tape, store, h, &b.edges, w).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn no_edges_and_identity_mlp_is_identity() {
        let (store, layer) = identity_layer(2);
        let x = Tensor::new(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let g = Graph::new("g", x.clone(), [], 0).unwrap();
        assert!(run_layer(&store, &layer, &g).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn isolated_equal_nodes_get_equal_outputs() {
        let mut store = ParamStore::new();
        let mut rng = RngStreams::new(5).stream("init");
        let layer = GinLayer::new(&mut store, "g", 2, 4, &mut rng).unwrap();
        let g = Graph::new("g", Tensor::new(2, 2, vec![0.3, -0.2, 0.3, -0.2]).unwrap(), [], 0).unwrap();
        let out = run_layer(&store, &layer, &g);
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn path_of_three_matches_matrix_arithmetic() {
        // 1-d features, eps = 0.5, MLP: x -> relu(2x - 1) -> 3y + 0.25
        let mut store = ParamStore::new();
        let mut rng = RngStreams::new(0).stream("init");
        let layer = GinLayer::new(&mut store, "g", 1, 1, &mut rng).unwrap();
        set(&mut store, layer.eps, 1, 1, vec![0.5]);
        set_linear(&mut store, &layer.mlp.layers[0], vec![2.0], vec![-1.0]);
        set_linear(&mut store, &layer.mlp.layers[1], vec![3.0], vec![0.25]);
        let x = Tensor::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let g = Graph::new("p", x, [(0, 1), (1, 2)], 0).unwrap();
        // agg = 1.5 h + A h = [1.5+2, 3+4, 4.5+2] = [3.5, 7, 6.5]
        let expected: Vec<f64> = [3.5f64, 7.0, 6.5].iter().map(|a| 3.0 * (2.0 * a - 1.0f64).max(0.0) + 0.25).collect();
        assert_eq!(run_layer(&store, &layer, &g).values(), expected.as_slice());
    }

    #[test]
    fn two_node_single_layer_pool_by_hand() {
        let mut store = ParamStore::new();
        let mut rng = RngStreams::new(0).stream("init");
        let enc = GinEncoder::new(&mut store, "e", 1, 1, 1, &mut rng).unwrap();
        let layer = &enc.layers[0];
        set_linear(&mut store, &layer.mlp.layers[0], vec![1.0], vec![0.0]);
        set_linear(&mut store, &layer.mlp.layers[1], vec![-2.0], vec![1.0]);
        let g = Graph::new("g", Tensor::new(2, 1, vec![1.0, 3.0]).unwrap(), [(0, 1)], 0).unwrap();
        let b = batch_graphs([&g]).unwrap();
        let mut tape = Tape::new();
        let (_, pooled) = encode_graph(&mut tape, &store, &enc, &b, None, None).unwrap();
        // agg = [1+3, 3+1] = [4, 4]; out = -2*4 + 1 = -7 for both nodes
        assert_eq!(tape.value(pooled).values(), &[-7.0]);
    }

    fn random_graph(seed: u64) -> Graph {
        let mut rng = RngStreams::new(seed).stream("data");
        crate::synthetic::generate_graph(&mut rng, "r".into(), 0.5, 0.0).unwrap()
    }

    #[test]
    fn node_permutation_leaves_graph_embedding_unchanged() {
        let mut store = ParamStore::new();
        let mut rng = RngStreams::new(9).stream("init");
        let enc = GinEncoder::new(&mut store, "e", 11, 8, 3, &mut rng).unwrap();
        for seed in 0..10 {
            let g = random_graph(seed);
            let mut prng = RngStreams::new(seed).stream("perm");
            let perm = crate::rng::permutation(&mut prng, g.num_nodes);
            let gp = g.permuted(&perm).unwrap();
            let emb = |gr: &Graph| {
                let b = batch_graphs([gr]).unwrap();
                let mut tape = Tape::new();
                let (_, p) = encode_graph(&mut tape, &store, &enc, &b, None, None).unwrap();
                tape.value(p).clone()
            };
            assert!(emb(&g).max_abs_diff(&emb(&gp)) < 1e-9);
        }
    }

    #[test]
    fn full_override_reproduces_plain_encoding_and_bad_shape_fails() {
        let mut store = ParamStore::new();
        let mut rng = RngStreams::new(9).stream("init");
        let enc = GinEncoder::new(&mut store, "e", 11, 8, 1, &mut rng).unwrap();
        let (g1, g2) = (random_graph(1), random_graph(2));
        let b = batch_graphs([&g1, &g2]).unwrap();
        let mut tape = Tape::new();
        let (_, plain) = encode_graph(&mut tape, &store, &enc, &b, None, None).unwrap();
        let w = tape.constant(b.edge_weights_from_dense(&b.block_adjacency()).unwrap());
        let (_, over) = encode_graph(&mut tape, &store, &enc, &b, None, Some(w)).unwrap();
        assert_eq!(tape.value(plain), tape.value(over));
        let bad = tape.constant(Tensor::zeros(b.num_edges() + 1, 1));
        assert!(matches!(
            encode_graph(&mut tape, &store, &enc, &b, None, Some(bad)),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn projections_are_unit_norm_and_heads_differ() {
        let mut store = ParamStore::new();
        let mut rng = RngStreams::new(3).stream("init");
        let heads = ProjectionHeads::new(&mut store, "p", 6, 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(2, 6, (0..12).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap());
        let zv = heads.project(&mut tape, &store, x, Head::Variant).unwrap();
        let zi = heads.project(&mut tape, &store, x, Head::Invariant).unwrap();
        let zv2 = heads.project(&mut tape, &store, x, Head::Variant).unwrap();
        for r in 0..2 {
            let n: f64 = tape.value(zv).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
            let cos: f64 = tape.value(zv).row(r).iter().map(|v| v * v).sum();
            assert!((cos - 1.0).abs() < 1e-9);
        }
        assert_eq!(tape.value(zv), tape.value(zv2));
        assert!(tape.value(zv).max_abs_diff(tape.value(zi)) > 1e-3);
    }

    #[test]
    fn zero_projection_input_is_guarded() {
        let mut store = ParamStore::new();
        let mut rng = RngStreams::new(3).stream("init");
        let heads = ProjectionHeads::new(&mut store, "p", 2, 2, &mut rng).unwrap();
        let last = heads.variant.layers.last().unwrap().clone();
        set_linear(&mut store, &last, vec![0.0; 4], vec![0.0; 2]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(1, 2, 1.0));
        let z = heads.project(&mut tape, &store, x, Head::Variant).unwrap();
        assert_eq!(tape.value(z).values(), &[0.0, 0.0]);
    }
}
