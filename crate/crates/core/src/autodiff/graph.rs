//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended to a tape in evaluation order, so every node's value is
//! computed exactly once when it is created and the tape is always a valid
//! topological order for the backward sweep.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{Gradients, ParamId, ParameterStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rich_attention::score::{distance_score, order_score_logit};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// The operation that produced a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Parameter,
    MatMul,
    Transpose,
    Add,
    Subtract,
    Multiply,
    Scale,
    Concat,
    Slice,
    EmbeddingLookup,
    Pad,
    Sigmoid,
    Ln,
    Exp,
    Relu,
    Gelu,
    Square,
    LayerNorm,
    MaskedSoftmax,
    CrossEntropyWithLogits,
    ReduceSum,
    ReduceMean,
    SquaredError,
    OrderScore,
    DistanceScore,
}

/// Row-major boolean mask with the same shape as the logits it gates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Self {
        assert_eq!(allowed.len(), rows * cols);
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allowed.push(f(r, c));
            }
        }
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn is_allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.allowed[r * self.cols..(r + 1) * self.cols]
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    Gather(NodeId, Rc<Vec<usize>>),
    Pad(NodeId, usize),
    Sigmoid(NodeId),
    Ln(NodeId),
    Exp(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Square(NodeId),
    /// Keeps the per-row inverse standard deviation for the adjoint.
    LayerNorm(NodeId, Vec<f64>),
    MaskedSoftmax(NodeId, Rc<Mask>),
    /// Keeps the row softmax and the number of scored rows.
    CrossEntropy(NodeId, Rc<Vec<Option<usize>>>, Tensor, usize),
    Sum(NodeId),
    Mean(NodeId),
    SquaredError(NodeId, NodeId),
    OrderScore(NodeId, Rc<Tensor>),
    DistanceScore(NodeId, NodeId, Rc<Tensor>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Parameter,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Subtract,
            Op::Mul(..) => OpKind::Multiply,
            Op::Scale(..) => OpKind::Scale,
            Op::ConcatCols(_) | Op::ConcatRows(_) => OpKind::Concat,
            Op::SliceRows(..) | Op::SliceCols(..) => OpKind::Slice,
            Op::Gather(..) => OpKind::EmbeddingLookup,
            Op::Pad(..) => OpKind::Pad,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Ln(_) => OpKind::Ln,
            Op::Exp(_) => OpKind::Exp,
            Op::Relu(_) => OpKind::Relu,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Square(_) => OpKind::Square,
            Op::LayerNorm(..) => OpKind::LayerNorm,
            Op::MaskedSoftmax(..) => OpKind::MaskedSoftmax,
            Op::CrossEntropy(..) => OpKind::CrossEntropyWithLogits,
            Op::Sum(_) => OpKind::ReduceSum,
            Op::Mean(_) => OpKind::ReduceMean,
            Op::SquaredError(..) => OpKind::SquaredError,
            Op::OrderScore(..) => OpKind::OrderScore,
            Op::DistanceScore(..) => OpKind::DistanceScore,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated adjoint; only leaves and parameters keep one.
    grad: Option<Tensor>,
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
}

fn broadcast_shape(
    op: &'static str,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::ShapeMismatch {
            op,
            left: a,
            right: b,
        }),
    }
}

fn broadcast_zip(a: &Tensor, b: &Tensor, out: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut t = Tensor::zeros(out.0, out.1);
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    for r in 0..out.0 {
        let (ra, rb) = (if ar == 1 { 0 } else { r }, if br == 1 { 0 } else { r });
        for c in 0..out.1 {
            let (ca, cb) = (if ac == 1 { 0 } else { c }, if bc == 1 { 0 } else { c });
            t.set(r, c, f(a.get(ra, ca), b.get(rb, cb)));
        }
    }
    t
}

/// Sums `grad` down to `shape`, undoing a broadcast.
fn reduce_to(grad: &Tensor, shape: (usize, usize)) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    for r in 0..grad.rows() {
        let ro = if shape.0 == 1 { 0 } else { r };
        for c in 0..grad.cols() {
            let co = if shape.1 == 1 { 0 } else { c };
            let v = out.get(ro, co) + grad.get(r, c);
            out.set(ro, co, v);
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Accumulated gradient of a leaf or parameter node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    /// A differentiable input.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A constant that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = broadcast_shape("add", self.shape(a), self.shape(b))?;
        let v = broadcast_zip(self.value(a), self.value(b), out, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = broadcast_shape("sub", self.shape(a), self.shape(b))?;
        let v = broadcast_zip(self.value(a), self.value(b), out, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = broadcast_shape("mul", self.shape(a), self.shape(b))?;
        let v = broadcast_zip(self.value(a), self.value(b), out, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// `x · weight + bias` with `bias` broadcast over rows.
    pub fn affine(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, weight)?;
        self.add(xw, bias)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]),
                    right: s,
                });
            }
            cols += s.1;
        }
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                v.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.1 != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]),
                    right: s,
                });
            }
            rows += s.0;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if start + len > s.0 {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                left: s,
                right: (start + len, s.1),
            });
        }
        let data = self.value(a).data()[start * s.1..(start + len) * s.1].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(len, s.1, data), Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if start + len > s.1 {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: s,
                right: (s.0, start + len),
            });
        }
        let mut v = Tensor::zeros(s.0, len);
        for r in 0..s.0 {
            v.row_mut(r)
                .copy_from_slice(&self.value(a).row(r)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::SliceCols(a, start), rg))
    }

    /// Row gather: embedding lookup, reordering and edge-endpoint selection.
    pub fn gather_rows(&mut self, table: NodeId, indices: Rc<Vec<usize>>) -> Result<NodeId> {
        let s = self.shape(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= s.0) {
            return Err(Error::invalid(format!(
                "row index {bad} out of range for table with {} rows",
                s.0
            )));
        }
        let v = self.value(table).select_rows(&indices);
        let rg = self.rg(&[table]);
        Ok(self.push(v, Op::Gather(table, indices), rg))
    }

    /// Prepends `k` zero rows and `k` zero columns.
    pub fn pad_leading(&mut self, a: NodeId, k: usize) -> NodeId {
        let (r, c) = self.shape(a);
        let mut v = Tensor::zeros(r + k, c + k);
        for i in 0..r {
            v.row_mut(i + k)[k..].copy_from_slice(self.value(a).row(i));
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::Pad(a, k), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::invalid("ln of a non-positive value"));
        }
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Ln(a), rg))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Square(a), rg)
    }

    /// Per-row standardization without scale and shift.
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut v = Tensor::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&y| (y - mean) * (y - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, &y) in v.row_mut(i).iter_mut().zip(row) {
                *o = (y - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::LayerNorm(a, inv_std), rg)
    }

    /// Row softmax over allowed positions. Disallowed positions get exactly
    /// zero weight; a row with nothing allowed is all zeros.
    pub fn masked_softmax(&mut self, a: NodeId, mask: Rc<Mask>) -> Result<NodeId> {
        let s = self.shape(a);
        if mask.shape() != s {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                left: s,
                right: mask.shape(),
            });
        }
        let x = self.value(a);
        let mut v = Tensor::zeros(s.0, s.1);
        for r in 0..s.0 {
            let allowed = mask.row(r);
            let row = x.row(r);
            let max = row
                .iter()
                .zip(allowed)
                .filter(|(_, &m)| m)
                .fold(f64::NEG_INFINITY, |m, (&y, _)| m.max(y));
            if max == f64::NEG_INFINITY {
                continue;
            }
            let out = v.row_mut(r);
            let mut total = 0.0;
            for c in 0..s.1 {
                if allowed[c] {
                    let e = (row[c] - max).exp();
                    out[c] = e;
                    total += e;
                }
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::MaskedSoftmax(a, mask), rg))
    }

    /// Mean negative log-likelihood over rows that carry a target. A call with
    /// no targeted rows yields exactly 0.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: Rc<Vec<Option<usize>>>,
    ) -> Result<NodeId> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: (r, c),
                right: (targets.len(), 1),
            });
        }
        let x = self.value(logits);
        let mut probs = Tensor::zeros(r, c);
        let mut loss = 0.0;
        let mut count = 0;
        for i in 0..r {
            let Some(t) = targets[i] else { continue };
            if t >= c {
                return Err(Error::invalid(format!("target {t} out of range for {c} classes")));
            }
            let row = x.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|&y| (y - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[t];
            for (p, &y) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (y - lse).exp();
            }
            count += 1;
        }
        let value = if count == 0 { 0.0 } else { loss / count as f64 };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy(logits, targets, probs, count),
            rg,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// `Σ (a − b)²`.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "squared_error",
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        let v = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::SquaredError(a, b), rg))
    }

    /// Order penalty `o·ln σ(z) + (1−o)·ln(1−σ(z))`, elementwise over logits.
    pub fn order_score(&mut self, logits: NodeId, orders: Rc<Tensor>) -> Result<NodeId> {
        if self.shape(logits) != orders.shape() {
            return Err(Error::ShapeMismatch {
                op: "order_score",
                left: self.shape(logits),
                right: orders.shape(),
            });
        }
        let v = self.value(logits).zip_map(&orders, |z, o| order_score_logit(o, z));
        let rg = self.rg(&[logits]);
        Ok(self.push(v, Op::OrderScore(logits, orders), rg))
    }

    /// Distance penalty `−θ²(d − μ)²/2` with a scalar `θ` node.
    pub fn distance_score(
        &mut self,
        mu: NodeId,
        theta: NodeId,
        dists: Rc<Tensor>,
    ) -> Result<NodeId> {
        if self.shape(mu) != dists.shape() {
            return Err(Error::ShapeMismatch {
                op: "distance_score",
                left: self.shape(mu),
                right: dists.shape(),
            });
        }
        if self.shape(theta) != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "distance_score",
                left: self.shape(theta),
                right: (1, 1),
            });
        }
        let th = self.value(theta).item();
        let v = self.value(mu).zip_map(&dists, |m, d| distance_score(d, m, th));
        let rg = self.rg(&[mu, theta]);
        Ok(self.push(v, Op::DistanceScore(mu, theta, dists), rg))
    }

    /// Reverse sweep from a scalar node. Leaf and parameter gradients
    /// accumulate across calls; intermediate adjoints are recomputed each time.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let s = self.shape(loss);
        if s != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: s,
                right: (1, 1),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf | Op::Param(_) => {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(acc) => acc.add_assign(&g),
                        None => node.grad = Some(g),
                    }
                    continue;
                }
                _ => {}
            }
            let contribs = self.local_adjoints(i, &g);
            for (id, t) in contribs {
                if !self.nodes[id.0].requires_grad {
                    continue;
                }
                match &mut adj[id.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    fn local_adjoints(&self, i: usize, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) => vec![
                (*a, g.matmul_bt(val(*b))),
                (*b, val(*a).matmul_at(g)),
            ],
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Add(a, b) => vec![
                (*a, reduce_to(g, val(*a).shape())),
                (*b, reduce_to(g, val(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(g, val(*a).shape())),
                (*b, reduce_to(&g.map(|x| -x), val(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = broadcast_zip(g, vb, g.shape(), |x, y| x * y);
                let gb = broadcast_zip(g, va, g.shape(), |x, y| x * y);
                vec![
                    (*a, reduce_to(&ga, va.shape())),
                    (*b, reduce_to(&gb, vb.shape())),
                ]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * s))],
            Op::ConcatCols(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let (r, c) = val(p).shape();
                        let mut t = Tensor::zeros(r, c);
                        for row in 0..r {
                            t.row_mut(row).copy_from_slice(&g.row(row)[off..off + c]);
                        }
                        off += c;
                        (p, t)
                    })
                    .collect()
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let (r, c) = val(p).shape();
                        let t = Tensor::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                        off += r;
                        (p, t)
                    })
                    .collect()
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut t = Tensor::zeros(r, c);
                t.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![(*a, t)]
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut t = Tensor::zeros(r, c);
                for row in 0..r {
                    t.row_mut(row)[*start..start + g.cols()].copy_from_slice(g.row(row));
                }
                vec![(*a, t)]
            }
            Op::Gather(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut t = Tensor::zeros(r, c);
                for (o, &src) in idx.iter().enumerate() {
                    for (d, &x) in t.row_mut(src).iter_mut().zip(g.row(o)) {
                        *d += x;
                    }
                }
                vec![(*a, t)]
            }
            Op::Pad(a, k) => {
                let (r, c) = val(*a).shape();
                let mut t = Tensor::zeros(r, c);
                for row in 0..r {
                    t.row_mut(row).copy_from_slice(&g.row(row + k)[*k..]);
                }
                vec![(*a, t)]
            }
            Op::Sigmoid(a) => vec![(*a, g.zip_map(&node.value, |gy, y| gy * y * (1.0 - y)))],
            Op::Ln(a) => vec![(*a, g.zip_map(val(*a), |gy, x| gy / x))],
            Op::Exp(a) => vec![(*a, g.zip_map(&node.value, |gy, y| gy * y))],
            Op::Relu(a) => vec![(
                *a,
                g.zip_map(val(*a), |gy, x| if x > 0.0 { gy } else { 0.0 }),
            )],
            Op::Gelu(a) => vec![(*a, g.zip_map(val(*a), |gy, x| gy * gelu_grad(x)))],
            Op::Square(a) => vec![(*a, g.zip_map(val(*a), |gy, x| 2.0 * gy * x))],
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let (r, c) = y.shape();
                let mut t = Tensor::zeros(r, c);
                for row in 0..r {
                    let (gr, yr) = (g.row(row), y.row(row));
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((o, &gv), &yv) in t.row_mut(row).iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[row] * (gv - mg - yv * mgy);
                    }
                }
                vec![(*a, t)]
            }
            Op::MaskedSoftmax(a, mask) => {
                let y = &node.value;
                let (r, c) = y.shape();
                let mut t = Tensor::zeros(r, c);
                for row in 0..r {
                    let (gr, yr) = (g.row(row), y.row(row));
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    let allowed = mask.row(row);
                    for col in 0..c {
                        if allowed[col] {
                            t.set(row, col, yr[col] * (gr[col] - dot));
                        }
                    }
                }
                vec![(*a, t)]
            }
            Op::CrossEntropy(a, targets, probs, count) => {
                let mut t = probs.clone();
                if *count > 0 {
                    let s = g.item() / *count as f64;
                    for (row, tgt) in targets.iter().enumerate() {
                        if let Some(k) = tgt {
                            let v = t.get(row, *k) - 1.0;
                            t.set(row, *k, v);
                        }
                    }
                    t.scale_in_place(s);
                }
                vec![(*a, t)]
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, Tensor::full(r, c, g.item()))]
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, Tensor::full(r, c, g.item() / (r * c).max(1) as f64))]
            }
            Op::SquaredError(a, b) => {
                let gi = g.item();
                let d = val(*a).zip_map(val(*b), |x, y| 2.0 * gi * (x - y));
                let nd = d.map(|x| -x);
                vec![(*a, d), (*b, nd)]
            }
            Op::OrderScore(z, orders) => vec![(
                *z,
                g.zip_map(
                    &val(*z).zip_map(orders, |zv, o| o - sigmoid(zv)),
                    |gy, d| gy * d,
                ),
            )],
            Op::DistanceScore(mu, theta, dists) => {
                let th = val(*theta).item();
                let mut g_mu = Tensor::zeros(g.rows(), g.cols());
                let mut g_th = 0.0;
                for ((o, (&gy, &m)), &d) in g_mu
                    .data_mut()
                    .iter_mut()
                    .zip(g.data().iter().zip(val(*mu).data()))
                    .zip(dists.data())
                {
                    let diff = d - m;
                    *o = gy * th * th * diff;
                    g_th -= gy * th * diff * diff;
                }
                vec![(*mu, g_mu), (*theta, Tensor::scalar(g_th))]
            }
        }
    }

    /// Gradients accumulated on parameter nodes, keyed by parameter.
    pub fn param_gradients(&self) -> Gradients {
        let mut out = Gradients::default();
        for node in &self.nodes {
            if let (Op::Param(pid), Some(g)) = (&node.op, &node.grad) {
                out.accumulate(*pid, g);
            }
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }
}
