//! Graph records, JSONL ingestion, batching and dataset splits.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::rng::{permutation, RngStreams};
use crate::tensor::Tensor;

/// An undirected graph with node features and a class label.
///
/// The adjacency is kept as a sorted list of `(i, j)` pairs with `i < j`;
/// [`Graph::adjacency`] materializes the dense symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub id: String,
    pub num_nodes: usize,
    pub node_features: Tensor,
    edges: Vec<(usize, usize)>,
    pub label: usize,
    pub true_env: Option<usize>,
    pub true_family: Option<usize>,
}

impl Graph {
    /// Validates and canonicalizes the edge list.
    pub fn new(
        id: impl Into<String>,
        node_features: Tensor,
        edges: impl IntoIterator<Item = (usize, usize)>,
        label: usize,
    ) -> Result<Self> {
        let n = node_features.rows();
        let mut seen = HashSet::new();
        let mut canon = Vec::new();
        for (i, j) in edges {
            if i == j {
                return Err(contract(format!("self-loop on node {i}")));
            }
            if i >= n || j >= n {
                return Err(contract(format!("edge ({i},{j}) out of range for {n} nodes")));
            }
            let e = (i.min(j), i.max(j));
            if !seen.insert(e) {
                return Err(contract(format!("duplicate edge ({},{})", e.0, e.1)));
            }
            canon.push(e);
        }
        canon.sort_unstable();
        Ok(Self {
            id: id.into(),
            num_nodes: n,
            node_features,
            edges: canon,
            label,
            true_env: None,
            true_family: None,
        })
    }

    /// Builds a graph from a dense adjacency, which must be symmetric,
    /// binary and zero on the diagonal.
    pub fn from_adjacency(id: impl Into<String>, node_features: Tensor, adjacency: &Tensor, label: usize) -> Result<Self> {
        let n = node_features.rows();
        if adjacency.shape() != [n, n] {
            return Err(contract(format!("adjacency {:?} for {n} nodes", adjacency.shape())));
        }
        let mut edges = Vec::new();
        for i in 0..n {
            if adjacency.get(i, i) != 0.0 {
                return Err(contract(format!("nonzero diagonal at {i}")));
            }
            for j in i + 1..n {
                let (a, b) = (adjacency.get(i, j), adjacency.get(j, i));
                if a != b {
                    return Err(contract(format!("asymmetric adjacency at ({i},{j})")));
                }
                match a {
                    0.0 => {}
                    1.0 => edges.push((i, j)),
                    v => return Err(contract(format!("non-binary adjacency entry {v}"))),
                }
            }
        }
        Self::new(id, node_features, edges, label)
    }

    pub fn with_truth(mut self, true_env: Option<usize>, true_family: Option<usize>) -> Self {
        self.true_env = true_env;
        self.true_family = true_family;
        self
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    pub fn adjacency(&self) -> Tensor {
        let n = self.num_nodes;
        let mut a = Tensor::zeros(n, n);
        for &(i, j) in &self.edges {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        a
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.num_nodes];
        for &(i, j) in &self.edges {
            d[i] += 1;
            d[j] += 1;
        }
        d
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes;
        if perm.len() != n || (0..n).any(|v| !perm.contains(&v)) {
            return Err(contract("node permutation is not a bijection"));
        }
        let d = self.feature_dim();
        let mut x = Tensor::zeros(n, d);
        for (old, &new) in perm.iter().enumerate() {
            x.values_mut()[new * d..(new + 1) * d].copy_from_slice(self.node_features.row(old));
        }
        let edges = self.edges.iter().map(|&(i, j)| (perm[i], perm[j]));
        Ok(Self::new(self.id.clone(), x, edges, self.label)?.with_truth(self.true_env, self.true_family))
    }
}

/// One line of the JSONL graph format.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    id: String,
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    node_features: Vec<Vec<f64>>,
    label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    true_env: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    true_family: Option<usize>,
}

impl From<&Graph> for GraphRecord {
    fn from(g: &Graph) -> Self {
        Self {
            id: g.id.clone(),
            num_nodes: g.num_nodes,
            edges: g.edges.iter().map(|&(i, j)| [i, j]).collect(),
            node_features: (0..g.num_nodes).map(|r| g.node_features.row(r).to_vec()).collect(),
            label: g.label,
            true_env: g.true_env,
            true_family: g.true_family,
        }
    }
}

impl GraphRecord {
    fn into_graph(self) -> Result<Graph> {
        if self.node_features.len() != self.num_nodes {
            return Err(contract(format!(
                "{} feature rows for {} nodes",
                self.node_features.len(),
                self.num_nodes
            )));
        }
        let width = self.node_features.first().map_or(0, Vec::len);
        if self.node_features.iter().any(|r| r.len() != width) {
            return Err(contract("ragged node feature rows"));
        }
        let x = if self.num_nodes == 0 {
            Tensor::zeros(0, 0)
        } else {
            Tensor::from_rows(&self.node_features)?
        };
        if !x.is_finite() {
            return Err(contract("non-finite node feature"));
        }
        let edges = self.edges.iter().map(|e| (e[0], e[1]));
        Ok(Graph::new(self.id, x, edges, self.label)?.with_truth(self.true_env, self.true_family))
    }
}

/// Reads one graph per line. Blank lines are skipped. All graphs must
/// share a feature width.
pub fn load_graphs(path: &Path) -> Result<Vec<Graph>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let shown = path.display().to_string();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: shown.clone(),
        line,
        msg,
    };
    let mut graphs = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraphRecord = serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        let g = rec.into_graph().map_err(|e| parse_err(line_no, e.to_string()))?;
        match width {
            Some(w) if w != g.feature_dim() => {
                return Err(parse_err(
                    line_no,
                    format!("feature width {} differs from {w}", g.feature_dim()),
                ))
            }
            _ => width = Some(g.feature_dim()),
        }
        graphs.push(g);
    }
    Ok(graphs)
}

pub fn graphs_to_jsonl(graphs: &[Graph]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for g in graphs {
        serde_json::to_writer(&mut out, &GraphRecord::from(g))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn save_graphs(path: &Path, graphs: &[Graph]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&graphs_to_jsonl(graphs)?)?;
    Ok(())
}

/// Points at the three split files of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub num_classes: usize,
    pub feature_dim: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Graph>,
    pub val: Vec<Graph>,
    pub test: Vec<Graph>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Loads all splits. Relative paths resolve against `base`.
    pub fn load_dataset(&self, base: &Path) -> Result<Dataset> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let ds = Dataset {
            train: load_graphs(&resolve(&self.train))?,
            val: load_graphs(&resolve(&self.val))?,
            test: load_graphs(&resolve(&self.test))?,
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
        };
        for g in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            if g.feature_dim() != self.feature_dim {
                return Err(contract(format!("graph {} has feature width {}", g.id, g.feature_dim())));
            }
            if g.label >= self.num_classes {
                return Err(contract(format!("graph {} label {} out of range", g.id, g.label)));
            }
        }
        Ok(ds)
    }
}

/// Several graphs stacked into one block-diagonal graph.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub true_envs: Vec<Option<usize>>,
    pub true_families: Vec<Option<usize>>,
    /// `N x d` stacked node features.
    pub features: Tensor,
    /// Global edge list, grouped by graph, `i < j`.
    pub edges: Rc<[(usize, usize)]>,
    /// Node offsets, length `B + 1`.
    pub offsets: Rc<[usize]>,
    /// Edge offsets into `edges`, length `B + 1`.
    pub edge_offsets: Vec<usize>,
    pub node_to_graph: Vec<usize>,
}

pub fn batch_graphs<'a, I>(graphs: I) -> Result<Batch>
where
    I: IntoIterator<Item = &'a Graph>,
{
    let graphs: Vec<&Graph> = graphs.into_iter().collect();
    let Some(first) = graphs.first() else {
        return Err(contract("cannot batch zero graphs"));
    };
    let d = first.feature_dim();
    let total: usize = graphs.iter().map(|g| g.num_nodes).sum();
    let mut features = Vec::with_capacity(total * d);
    let mut edges = Vec::new();
    let mut offsets = vec![0];
    let mut edge_offsets = vec![0];
    let mut node_to_graph = Vec::with_capacity(total);
    for (b, g) in graphs.iter().enumerate() {
        if g.feature_dim() != d {
            return Err(contract(format!(
                "graph {} has feature width {}, batch has {d}",
                g.id,
                g.feature_dim()
            )));
        }
        let base = *offsets.last().unwrap();
        features.extend_from_slice(g.node_features.values());
        edges.extend(g.edges.iter().map(|&(i, j)| (base + i, base + j)));
        node_to_graph.extend(std::iter::repeat_n(b, g.num_nodes));
        offsets.push(base + g.num_nodes);
        edge_offsets.push(edges.len());
    }
    Ok(Batch {
        ids: graphs.iter().map(|g| g.id.clone()).collect(),
        labels: graphs.iter().map(|g| g.label).collect(),
        true_envs: graphs.iter().map(|g| g.true_env).collect(),
        true_families: graphs.iter().map(|g| g.true_family).collect(),
        features: Tensor::new(total, d, features)?,
        edges: edges.into(),
        offsets: offsets.into(),
        edge_offsets,
        node_to_graph,
    })
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Dense `N x N` block-diagonal adjacency.
    pub fn block_adjacency(&self) -> Tensor {
        let n = self.num_nodes();
        let mut a = Tensor::zeros(n, n);
        for &(i, j) in self.edges.iter() {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        a
    }

    /// Converts a dense `N x N` masked adjacency into per-edge weights.
    /// Its support must lie on the batch's edges.
    pub fn edge_weights_from_dense(&self, adj: &Tensor) -> Result<Tensor> {
        let n = self.num_nodes();
        if adj.shape() != [n, n] {
            return Err(contract(format!("override {:?} for batch of {n} nodes", adj.shape())));
        }
        let mut w = Vec::with_capacity(self.num_edges());
        let mut on_edges = 0.0;
        for &(i, j) in self.edges.iter() {
            if adj.get(i, j) != adj.get(j, i) {
                return Err(contract(format!("override asymmetric at ({i},{j})")));
            }
            w.push(adj.get(i, j));
            on_edges += 2.0 * adj.get(i, j).abs();
        }
        let total: f64 = adj.values().iter().map(|v| v.abs()).sum();
        if total != on_edges {
            return Err(contract("override has entries outside the batch edges"));
        }
        Tensor::new(w.len(), 1, w)
    }

    /// Splits the batch back into its graphs.
    pub fn unbatch(&self) -> Result<Vec<Graph>> {
        let d = self.features.cols();
        (0..self.len())
            .map(|b| {
                let (lo, hi) = (self.offsets[b], self.offsets[b + 1]);
                let x = Tensor::new(hi - lo, d, self.features.values()[lo * d..hi * d].to_vec())?;
                let edges = self.edges[self.edge_offsets[b]..self.edge_offsets[b + 1]]
                    .iter()
                    .map(|&(i, j)| (i - lo, j - lo));
                Ok(Graph::new(self.ids[b].clone(), x, edges, self.labels[b])?
                    .with_truth(self.true_envs[b], self.true_families[b]))
            })
            .collect()
    }
}

/// Seeded disjoint split of `graphs` into parts with the given fractions.
/// Part sizes are cumulative roundings, so they always sum to `graphs.len()`.
pub fn split_dataset(graphs: &[Graph], fractions: &[f64], seed: u64) -> Result<Vec<Vec<Graph>>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(contract("fractions must lie in [0, 1]"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(contract(format!("fractions sum to {total}, not 1")));
    }
    let n = graphs.len();
    let mut rng = RngStreams::new(seed).stream(crate::rng::STREAM_SHUFFLE);
    let order = permutation(&mut rng, n);
    let mut parts = Vec::with_capacity(fractions.len());
    let mut acc = 0.0;
    let mut start = 0;
    for (k, f) in fractions.iter().enumerate() {
        acc += f;
        let end = if k + 1 == fractions.len() {
            n
        } else {
            ((acc * n as f64).round() as usize).min(n)
        };
        parts.push(order[start..end].iter().map(|&i| graphs[i].clone()).collect());
        start = end;
    }
    Ok(parts)
}
