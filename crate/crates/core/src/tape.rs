//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a
//! node holding its value and the indices of its inputs; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints. Parameters enter the
//! tape through [`Tape::param`], and their gradients are added into the
//! owning [`ParamStore`] when the tape is consumed.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::error::{contract, dim, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Affine(Var, f64),
    AddConst(Var),
    Concat(Vec<Var>),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    MaskedLogSoftmax(Var, Rc<[bool]>),
    Sum(Var),
    Mean(Var),
    MaxRows(Var, Vec<usize>),
    L2Normalize(Var, Vec<(f64, bool)>),
    Dropout(Var, Vec<f64>),
    GatherRows(Var, Rc<[usize]>),
    SegmentMean(Var, Rc<[usize]>),
    Propagate {
        h: Var,
        w: Var,
        edges: Rc<[(usize, usize)]>,
    },
    StraightThrough(Var, Vec<bool>),
    WeightedSum(Var, Rc<[f64]>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    params: Vec<(ParamId, Var)>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter gradient into `store` (additive accumulation).
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, var) in &self.params {
            if let Some(g) = self.get(var) {
                store.accumulate_grad(id, g);
            } else {
                let n = store.value(id).len();
                store.accumulate_grad(id, &vec![0.0; n]);
            }
        }
    }
}

fn domain(op: &'static str, detail: impl Into<String>) -> Error {
    Error::NumericDomain {
        op,
        detail: detail.into(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(domain(name, "non-finite result"));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Free variable whose gradient can be read back from [`Gradients`].
    pub fn var(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = if p.requires_grad {
            self.var(p.value.clone())
        } else {
            self.constant(p.value.clone())
        };
        self.bound.insert(id, v);
        if p.requires_grad {
            self.params.push((id, v));
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng, "transpose")
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim(name, format!("{sa:?} vs {sb:?}")));
        }
        let v: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(sa[0], sa[1], v)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let [r, c] = self.shape(a);
        Tensor::new(r, c, self.value(a).values().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng, "mul")
    }

    /// `a (n x c) + bias (1 x c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        if self.shape(bias) != [1, c] {
            return Err(dim("add_row", format!("{:?} + {:?}", [r, c], self.shape(bias))));
        }
        let bv = self.value(bias).values().to_vec();
        let mut out = self.value(a).clone();
        for row in out.values_mut().chunks_mut(c.max(1)) {
            for (o, b) in row.iter_mut().zip(&bv) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddRow(a, bias), ng, "add_row")
    }

    /// `a * s` where `s` is a `1 x 1` variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1, 1] {
            return Err(dim("mul_scalar", format!("scalar has shape {:?}", self.shape(s))));
        }
        let sv = self.scalar(s);
        let out = self.map(a, |x| x * sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(out, Op::MulScalar(a, s), ng, "mul_scalar")
    }

    /// `scale * a + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.map(a, |x| scale * x + shift);
        let ng = self.ng(a);
        self.push(out, Op::Affine(a, scale), ng, "affine")
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var> {
        self.affine(a, scale, 0.0)
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(dim("add_const", format!("{:?} vs {:?}", self.shape(a), c.shape())));
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.values_mut().iter_mut().zip(c.values()) {
            *o += v;
        }
        let ng = self.ng(a);
        self.push(out, Op::AddConst(a), ng, "add_const")
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(dim("concat", "no inputs"));
        };
        let rows = self.shape(first)[0];
        if parts.iter().any(|&p| self.shape(p)[0] != rows) {
            return Err(dim("concat", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let c = self.shape(p)[1];
            let v = self.value(p).values();
            for r in 0..rows {
                out[r * total + off..r * total + off + c].copy_from_slice(&v[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(rows, total, out)?, Op::Concat(parts.to_vec()), ng, "concat")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng, "sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng, "relu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::exp);
        if !out.is_finite() {
            return Err(domain("exp", "overflow"));
        }
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).values().iter().find(|&&x| x <= 0.0) {
            return Err(domain("log", format!("argument {x} is not positive")));
        }
        let out = self.map(a, f64::ln);
        let ng = self.ng(a);
        self.push(out, Op::Log(a), ng, "log")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::abs);
        let ng = self.ng(a);
        self.push(out, Op::Abs(a), ng, "abs")
    }

    /// Clamp into `[lo, hi]`; gradient is zero where clamping was active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.map(a, |x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(out, Op::Clamp(a, lo, hi), ng, "clamp")
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        let mut out = self.value(a).clone();
        for row in out.values_mut().chunks_mut(c.max(1)).take(r) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng, "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        let mut out = self.value(a).clone();
        for row in out.values_mut().chunks_mut(c.max(1)).take(r) {
            let lse = log_sum_exp(row.iter().copied());
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng, "log_softmax")
    }

    /// Row-wise log-softmax restricted to entries where `mask` is true.
    /// Masked-out outputs are zero and receive no gradient. Rows with an
    /// empty mask are all zero.
    pub fn masked_log_softmax(&mut self, a: Var, mask: Rc<[bool]>) -> Result<Var> {
        let [r, c] = self.shape(a);
        if mask.len() != r * c {
            return Err(dim("masked_log_softmax", "mask size"));
        }
        let mut out = self.value(a).clone();
        for (i, row) in out.values_mut().chunks_mut(c.max(1)).take(r).enumerate() {
            let m = &mask[i * c..(i + 1) * c];
            if !m.iter().any(|&b| b) {
                row.iter_mut().for_each(|x| *x = 0.0);
                continue;
            }
            let lse = log_sum_exp(row.iter().zip(m).filter(|(_, &b)| b).map(|(&x, _)| x));
            for (x, &b) in row.iter_mut().zip(m) {
                *x = if b { *x - lse } else { 0.0 };
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::MaskedLogSoftmax(a, mask), ng, "masked_log_softmax")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).values().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(dim("mean", "empty tensor"));
        }
        let s: f64 = self.value(a).values().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s / n as f64), Op::Mean(a), ng, "mean")
    }

    /// Row maxima as an `n x 1` column; ties resolve to the lowest index.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        if c == 0 {
            return Err(dim("max_rows", "no columns"));
        }
        let v = self.value(a);
        let mut arg = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = v.row(i);
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            out.push(row[best]);
        }
        let ng = self.ng(a);
        self.push(Tensor::new(r, 1, out)?, Op::MaxRows(a, arg), ng, "max_rows")
    }

    /// Row-wise `x / max(|x|, eps)`.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let [r, c] = self.shape(a);
        let mut out = self.value(a).clone();
        let mut divisors = Vec::with_capacity(r);
        for row in out.values_mut().chunks_mut(c.max(1)).take(r) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let guarded = n < eps;
            if guarded {
                log::warn!("l2_normalize: row norm {n:e} below guard {eps:e}");
            }
            let d = n.max(eps);
            row.iter_mut().for_each(|x| *x /= d);
            divisors.push((d, guarded));
        }
        let ng = self.ng(a);
        self.push(out, Op::L2Normalize(a, divisors), ng, "l2_normalize")
    }

    /// Inverted dropout with keep probability `keep`. `rng = None` disables it.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, keep: f64, rng: Option<&mut R>) -> Result<Var> {
        let Some(rng) = rng else { return Ok(a) };
        if !(0.0 < keep && keep <= 1.0) {
            return Err(contract(format!("dropout keep probability {keep} not in (0, 1]")));
        }
        if keep == 1.0 {
            return Ok(a);
        }
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let [r, c] = self.shape(a);
        let out: Vec<f64> = self.value(a).values().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let ng = self.ng(a);
        self.push(Tensor::new(r, c, out)?, Op::Dropout(a, mask), ng, "dropout")
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let [r, c] = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(dim("gather_rows", format!("row {bad} out of {r}")));
        }
        let v = self.value(a).values();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        self.push(Tensor::new(idx.len(), c, out)?, Op::GatherRows(a, idx), ng, "gather_rows")
    }

    /// Mean of consecutive row blocks `offsets[g]..offsets[g+1]`.
    pub fn segment_mean(&mut self, a: Var, offsets: Rc<[usize]>) -> Result<Var> {
        let [r, c] = self.shape(a);
        if offsets.first() != Some(&0) || offsets.last() != Some(&r) || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(dim("segment_mean", "offsets must partition the rows"));
        }
        let g = offsets.len() - 1;
        let v = self.value(a).values();
        let mut out = vec![0.0; g * c];
        for s in 0..g {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if hi == lo {
                continue;
            }
            let inv = 1.0 / (hi - lo) as f64;
            let o = &mut out[s * c..(s + 1) * c];
            for i in lo..hi {
                for (acc, x) in o.iter_mut().zip(&v[i * c..(i + 1) * c]) {
                    *acc += x;
                }
            }
            o.iter_mut().for_each(|x| *x *= inv);
        }
        let ng = self.ng(a);
        self.push(Tensor::new(g, c, out)?, Op::SegmentMean(a, offsets), ng, "segment_mean")
    }

    /// Neighbour sum `out_i = sum_j A_ij h_j` where `A` is given as weighted
    /// undirected edges: `edges[e] = (i, j)` contributes `w_e` to both
    /// `A_ij` and `A_ji`. `w` is an `E x 1` column.
    pub fn propagate(&mut self, h: Var, w: Var, edges: Rc<[(usize, usize)]>) -> Result<Var> {
        let [n, c] = self.shape(h);
        if self.shape(w) != [edges.len(), 1] {
            return Err(dim("propagate", format!("weights {:?} for {} edges", self.shape(w), edges.len())));
        }
        if let Some(&(i, j)) = edges.iter().find(|&&(i, j)| i >= n || j >= n || i == j) {
            return Err(dim("propagate", format!("edge ({i},{j}) invalid for {n} nodes")));
        }
        let hv = self.value(h).values();
        let wv = self.value(w).values();
        let mut out = vec![0.0; n * c];
        for (e, &(i, j)) in edges.iter().enumerate() {
            let we = wv[e];
            if we == 0.0 {
                continue;
            }
            for k in 0..c {
                out[i * c + k] += we * hv[j * c + k];
                out[j * c + k] += we * hv[i * c + k];
            }
        }
        let ng = self.ng(h) || self.ng(w);
        self.push(Tensor::new(n, c, out)?, Op::Propagate { h, w, edges }, ng, "propagate")
    }

    /// Forward value `hard`; backward passes the gradient to `soft` where
    /// `pass` is set and blocks it elsewhere.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor, pass: Vec<bool>) -> Result<Var> {
        if hard.shape() != self.shape(soft) || pass.len() != hard.len() {
            return Err(dim("straight_through", "shape mismatch"));
        }
        let ng = self.ng(soft);
        self.push(hard, Op::StraightThrough(soft, pass), ng, "straight_through")
    }

    /// Scalar `sum_ij a_ij * c_ij` for constant weights `c`.
    pub fn weighted_sum(&mut self, a: Var, weights: Rc<[f64]>) -> Result<Var> {
        if weights.len() != self.value(a).len() {
            return Err(dim("weighted_sum", "weight count"));
        }
        let s = self.value(a).values().iter().zip(weights.iter()).map(|(x, w)| x * w).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::WeightedSum(a, weights), ng, "weighted_sum")
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1, 1] {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params,
        })
    }

    /// Reverse pass that adds parameter gradients into `store`.
    pub fn backward_into(self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let g = self.backward(loss)?;
        g.accumulate_into(store);
        Ok(())
    }

    fn propagate_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        let y = node.value.values();
        let [rows, cols] = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let [n, k] = val(*a).shape();
                let m = val(*b).shape()[1];
                let bt = val(*b).transpose();
                acc(*a, &mut |ga| matmul_into(g, bt.values(), ga, n, m, k));
                let at = val(*a).transpose();
                acc(*b, &mut |gb| matmul_into(at.values(), g, gb, k, n, m));
            }
            Op::Transpose(a) => {
                let gt = Tensor::new(rows, cols, g.to_vec()).expect("shape").transpose();
                acc(*a, &mut |ga| add_into(ga, gt.values()));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).values(), val(*b).values());
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*bias, &mut |gb| {
                    for row in g.chunks(cols.max(1)) {
                        add_into(gb, row);
                    }
                });
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s).item();
                let av = val(*a).values();
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d * sv));
                acc(*s, &mut |gs| gs[0] += g.iter().zip(av).map(|(d, x)| d * x).sum::<f64>());
            }
            Op::Affine(a, scale) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d * scale));
            }
            Op::AddConst(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = val(p).shape()[1];
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * cols + off..r * cols + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Relu(a) => {
                let av = val(*a).values();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * y[i];
                }
            }),
            Op::Log(a) => {
                let av = val(*a).values();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / av[i];
                    }
                });
            }
            Op::Abs(a) => {
                let av = val(*a).values();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * sign(av[i]);
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = val(*a).values();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if av[i] >= *lo && av[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax(a) => acc(*a, &mut |ga| {
                for r in 0..rows {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        ga[r * cols + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }),
            Op::LogSoftmax(a) => acc(*a, &mut |ga| {
                for r in 0..rows {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let total: f64 = gs.iter().sum();
                    for j in 0..cols {
                        ga[r * cols + j] += gs[j] - ys[j].exp() * total;
                    }
                }
            }),
            Op::MaskedLogSoftmax(a, mask) => acc(*a, &mut |ga| {
                for r in 0..rows {
                    let range = r * cols..(r + 1) * cols;
                    let m = &mask[range.clone()];
                    let ys = &y[range.clone()];
                    let gs = &g[range];
                    let total: f64 = gs.iter().zip(m).filter(|(_, &b)| b).map(|(d, _)| d).sum();
                    for j in 0..cols {
                        if m[j] {
                            ga[r * cols + j] += gs[j] - ys[j].exp() * total;
                        }
                    }
                }
            }),
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::MaxRows(a, arg) => {
                let c = val(*a).shape()[1];
                acc(*a, &mut |ga| {
                    for (r, &j) in arg.iter().enumerate() {
                        ga[r * c + j] += g[r];
                    }
                });
            }
            Op::L2Normalize(a, divisors) => acc(*a, &mut |ga| {
                // y = x / d with d = max(|x|, eps): Jacobian (I - y y^T) / d
                // when the norm is used, I / eps when the guard is active.
                for r in 0..rows {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let (d, guarded) = divisors[r];
                    let dot: f64 = if guarded {
                        0.0
                    } else {
                        ys.iter().zip(gs).map(|(a, b)| a * b).sum()
                    };
                    for j in 0..cols {
                        ga[r * cols + j] += (gs[j] - ys[j] * dot) / d;
                    }
                }
            }),
            Op::Dropout(a, mask) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * mask[i];
                }
            }),
            Op::GatherRows(a, idx) => acc(*a, &mut |ga| {
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut ga[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }),
            Op::SegmentMean(a, offsets) => acc(*a, &mut |ga| {
                for s in 0..offsets.len() - 1 {
                    let (lo, hi) = (offsets[s], offsets[s + 1]);
                    if hi == lo {
                        continue;
                    }
                    let inv = 1.0 / (hi - lo) as f64;
                    let gs = &g[s * cols..(s + 1) * cols];
                    for i in lo..hi {
                        for k in 0..cols {
                            ga[i * cols + k] += gs[k] * inv;
                        }
                    }
                }
            }),
            Op::Propagate { h, w, edges } => {
                let c = cols;
                let wv = val(*w).values();
                let hv = val(*h).values();
                acc(*h, &mut |gh| {
                    for (e, &(i, j)) in edges.iter().enumerate() {
                        let we = wv[e];
                        if we == 0.0 {
                            continue;
                        }
                        for k in 0..c {
                            gh[j * c + k] += we * g[i * c + k];
                            gh[i * c + k] += we * g[j * c + k];
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for (e, &(i, j)) in edges.iter().enumerate() {
                        let mut s = 0.0;
                        for k in 0..c {
                            s += g[i * c + k] * hv[j * c + k] + g[j * c + k] * hv[i * c + k];
                        }
                        gw[e] += s;
                    }
                });
            }
            Op::StraightThrough(soft, pass) => acc(*soft, &mut |gs| {
                for i in 0..gs.len() {
                    if pass[i] {
                        gs[i] += g[i];
                    }
                }
            }),
            Op::WeightedSum(a, w) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[0] * w[i];
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
