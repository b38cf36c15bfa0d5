//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and `backward` walks the tape in reverse exactly once.

use std::collections::BTreeMap;

use super::fft::{correlate_many, convolve_many};
use super::tensor::{strides, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Softplus,
    Silu,
    Sin,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Softplus => softplus(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Sin => x.sin(),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Softplus => sigmoid(x),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Sin => x.cos(),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

const LAYERNORM_EPS: f64 = 1e-5;
const NORMALIZE_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Unary(NodeId, Unary),
    MatMul(NodeId, NodeId),
    Permute(NodeId, Vec<usize>),
    Reshape(NodeId),
    Slice { a: NodeId, axis: usize, start: usize },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Reduce { a: NodeId, axis: usize, mean: bool },
    SumAll(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm(Box<BatchNormCache>),
    Embedding { table: NodeId, ids: Vec<usize> },
    CrossEntropy { logits: NodeId, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    L2Normalize { a: NodeId, norms: Vec<f64> },
    Conv1d { x: NodeId, w: NodeId, b: NodeId, pad_left: usize },
    LongConv { x: NodeId, filter: NodeId, causal: bool },
    SelectiveScan(Box<ScanCache>),
}

struct BatchNormCache {
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
    train: bool,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

struct ScanCache {
    u: NodeId,
    dt: NodeId,
    a: NodeId,
    bm: NodeId,
    cm: NodeId,
    /// Hidden states after each step, laid out (B, L, D, N).
    states: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf without a parameter name.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Differentiable leaf whose gradient is reported under the parameter's name.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        let id = self.push(value.clone(), Op::Leaf, true);
        self.nodes[id.0].param = Some(name.to_string());
        id
    }

    /// Names of all parameters bound so far, sorted and deduplicated.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.nodes.iter().filter_map(|n| n.param.clone()).collect();
        names.sort();
        names.dedup();
        names
    }

    /// Copy of `a` cut off from the tape.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.constant(v)
    }

    // ---- elementwise -------------------------------------------------------

    fn broadcast(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || sa.ends_with(sb) {
            Ok(sa.to_vec())
        } else if sb.ends_with(sa) {
            Ok(sb.to_vec())
        } else {
            Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    fn binary(&mut self, name: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let shape = self.broadcast(name, a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let (na, nb) = (va.len(), vb.len());
        let out = Tensor::from_fn(&shape, |i| f(va[i % na], vb[i % nb]));
        Ok((out, self.any_grad(&[a, b])))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (v, g) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (v, g) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (v, g) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        let g = self.requires_grad(a);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn unary(&mut self, a: NodeId, kind: Unary) -> NodeId {
        let v = self.value(a).map(|x| kind.apply(x));
        let g = self.requires_grad(a);
        self.push(v, Op::Unary(a, kind), g)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Exp)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Softplus)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Silu)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Sin)
    }

    /// Inverted dropout: zeroes entries with probability `p` and rescales the rest.
    pub fn dropout(&mut self, a: NodeId, p: f64, rng: &mut impl rand::Rng) -> Result<NodeId> {
        if p <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let mask = Tensor::from_fn(self.shape(a), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    // ---- linear algebra ---------------------------------------------------

    /// `a: [.., m, k]` times `b: [k, n]` (shared) or `b: [.., k, n]` (batched).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batched = sb.len() > 2;
        if k != k2 || (batched && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                let boff = if batched { bi * k * n } else { 0 };
                gemm(&va[bi * m * k..], &vb[boff..], &mut out[bi * m * n..], m, k, n);
            }
        }
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), g))
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for {shape:?}")));
        }
        let v = permute_tensor(self.value(a), axes);
        let g = self.requires_grad(a);
        Ok(self.push(v, Op::Permute(a, axes.to_vec()), g))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {r}")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).clone().reshaped(shape.to_vec())?;
        let g = self.requires_grad(a);
        Ok(self.push(v, Op::Reshape(a), g))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let g = self.requires_grad(a);
        Ok(self.push(Tensor::new(oshape, out)?, Op::Slice { a, axis, start }, g))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &id in inputs {
            let s = self.shape(id);
            let ok = s.len() == first.len() && s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]);
            if !ok {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &id in inputs {
                let n = self.shape(id)[axis];
                let src = self.value(id).data();
                out.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let g = self.any_grad(inputs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { inputs: inputs.to_vec(), axis }, g))
    }

    /// Sum (or mean) over one axis, which is removed from the shape.
    pub fn reduce(&mut self, a: NodeId, axis: usize, mean: bool) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("reduce", format!("axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let g = self.requires_grad(a);
        Ok(self.push(Tensor::new(oshape, out)?, Op::Reduce { a, axis, mean }, g))
    }

    pub fn mean_pool(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(a, axis, true)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let g = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), g)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    // ---- normalisation and activations over the last axis -----------------

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = row_map(self.value(a), softmax_row);
        let g = self.requires_grad(a);
        self.push(v, Op::Softmax(a), g)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let v = row_map(self.value(a), |r, out| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for (o, x) in out.iter_mut().zip(r) {
                *o = x - lse;
            }
        });
        let g = self.requires_grad(a);
        self.push(v, Op::LogSoftmax(a), g)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", format!("features {d}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta))));
        }
        let xv = self.value(x);
        let rows = xv.numel() / d;
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        let g = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, xhat, rstd }, g))
    }

    /// Batch norm over the last (channel) axis. In training mode statistics
    /// come from the batch; otherwise `running` supplies (mean, var).
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, running: Option<(&[f64], &[f64])>) -> Result<NodeId> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", format!("channels {c}, gamma {:?}", self.shape(gamma))));
        }
        let xv = self.value(x);
        let rows = xv.numel() / c;
        let train = running.is_none();
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for r in 0..rows {
                    for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                for r in 0..rows {
                    for j in 0..c {
                        var[j] += (xv.row(r)[j] - mean[j]).powi(2);
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (mean, var)
            }
        };
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + LAYERNORM_EPS).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.numel()];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            for j in 0..c {
                let h = (xv.row(r)[j] - mean[j]) * rstd[j];
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv[j] + bv[j];
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        let g = self.any_grad(&[x, gamma, beta]);
        let cache = BatchNormCache { x, gamma, beta, xhat, rstd, train, batch_mean: mean, batch_var: var };
        Ok(self.push(v, Op::BatchNorm(Box::new(cache)), g))
    }

    /// Statistics computed by a training-mode batch norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<BatchStats> {
        match &self.nodes[id.0].op {
            Op::BatchNorm(c) if c.train => Some(BatchStats {
                mean: c.batch_mean.clone(),
                var: c.batch_var.clone(),
                count: self.nodes[c.x.0].value.numel() / c.batch_mean.len(),
            }),
            _ => None,
        }
    }

    pub fn l2_normalize(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let d = v.last_dim();
        let rows = v.numel() / d;
        let norms: Vec<f64> = (0..rows)
            .map(|r| (v.row(r).iter().map(|x| x * x).sum::<f64>() + NORMALIZE_EPS).sqrt())
            .collect();
        let out = Tensor::from_fn(v.shape(), |i| v.data()[i] / norms[i / d]);
        let g = self.requires_grad(a);
        self.push(out, Op::L2Normalize { a, norms }, g)
    }

    /// Row-wise cosine similarity of two `[.., d]` tensors, shape `[..]`.
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let na = self.l2_normalize(a);
        let nb = self.l2_normalize(b);
        let p = self.mul(na, nb)?;
        let axis = self.shape(p).len() - 1;
        self.reduce(p, axis, false)
    }

    // ---- lookups and losses -----------------------------------------------

    /// Gathers rows of `table: [V, D]`; output shape is `prefix ++ [D]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], prefix: &[usize]) -> Result<NodeId> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", format!("table {ts:?}, {} ids for prefix {prefix:?}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= ts[0]) {
            return Err(Error::shape("embedding", format!("id {bad} out of range {}", ts[0])));
        }
        let d = ts[1];
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let g = self.requires_grad(table);
        Ok(self.push(Tensor::new(shape, out)?, Op::Embedding { table, ids: ids.to_vec() }, g))
    }

    /// Mean negative log-likelihood over rows with a target; `None` rows are ignored.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.numel() / v;
        if rows != targets.len() {
            return Err(Error::shape("cross_entropy", format!("{rows} rows vs {} targets", targets.len())));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::shape("cross_entropy", format!("target {bad} outside {v} classes")));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::shape("cross_entropy", "no targets"));
        }
        let mut probs = vec![0.0; lv.numel()];
        let mut loss = 0.0;
        for r in 0..rows {
            softmax_row(lv.row(r), &mut probs[r * v..(r + 1) * v]);
            if let Some(t) = targets[r] {
                let row = lv.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                loss += lse - row[t];
            }
        }
        let g = self.requires_grad(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count };
        Ok(self.push(Tensor::scalar(loss / count as f64), op, g))
    }

    /// Mean squared error between two same-shaped tensors.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    // ---- sequence operators -----------------------------------------------

    /// `x: [B, L, Cin]`, `w: [Cout, Cin, K]`, `b: [Cout]` -> `[B, L + pl + pr - K + 1, Cout]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, pad_left: usize, pad_right: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[2] || self.shape(b) != [sw[0]] {
            return Err(Error::shape("conv1d", format!("input {sx:?}, weight {sw:?}, bias {:?}", self.shape(b))));
        }
        let (bsz, len, cin) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if len + pad_left + pad_right < k {
            return Err(Error::shape("conv1d", format!("length {len} with padding ({pad_left}, {pad_right}) is shorter than kernel {k}")));
        }
        let lout = len + pad_left + pad_right - k + 1;
        let wt = kernel_major(self.value(w).data(), cout, cin, k);
        let (xv, bv) = (self.value(x).data(), self.value(b).data());
        let mut out = vec![0.0; bsz * lout * cout];
        for bi in 0..bsz {
            for t in 0..lout {
                let orow = &mut out[(bi * lout + t) * cout..(bi * lout + t + 1) * cout];
                orow.copy_from_slice(bv);
                for j in 0..k {
                    let Some(src) = (t + j).checked_sub(pad_left).filter(|&s| s < len) else { continue };
                    let xrow = &xv[(bi * len + src) * cin..(bi * len + src + 1) * cin];
                    // wt[j] is [cin, cout]
                    gemm(xrow, &wt[j * cin * cout..], orow, 1, cin, cout);
                }
            }
        }
        let g = self.any_grad(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![bsz, lout, cout], out)?, Op::Conv1d { x, w, b, pad_left }, g))
    }

    /// Per-channel long convolution of `x: [B, L, D]` with `filter`, evaluated by FFT.
    /// Causal filters have `L` rows (offsets `0..L`); non-causal filters have
    /// `2L - 1` rows (offsets `-(L-1)..=L-1`).
    pub fn long_conv(&mut self, x: NodeId, filter: NodeId, causal: bool) -> Result<NodeId> {
        let (sx, sf) = (self.shape(x).to_vec(), self.shape(filter).to_vec());
        let rows = |l: usize| if causal { l } else { 2 * l - 1 };
        if sx.len() != 3 || sf.len() != 2 || sf[1] != sx[2] || sf[0] != rows(sx[1]) {
            return Err(Error::shape("long_conv", format!("input {sx:?}, filter {sf:?}, causal {causal}")));
        }
        let (bsz, len, d) = (sx[0], sx[1], sx[2]);
        let xs = channel_signals(self.value(x).data(), bsz, len, d);
        let hs = filter_signals(self.value(filter).data(), len, d, causal);
        let ys = convolve_many(&xs, &hs, len);
        let out = from_channel_signals(&ys, bsz, len, d);
        let g = self.any_grad(&[x, filter]);
        Ok(self.push(Tensor::new(sx, out)?, Op::LongConv { x, filter, causal }, g))
    }

    /// Diagonal selective state-space scan.
    ///
    /// `h_t = exp(dt_t * A) * h_{t-1} + dt_t * B_t * u_t`, `y_t = sum_n C_t[n] h_t[n]`
    /// with `u, dt: [B, L, D]`, `A: [D, N]`, `B, C: [B, L, N]`.
    pub fn selective_scan(&mut self, u: NodeId, dt: NodeId, a: NodeId, bm: NodeId, cm: NodeId) -> Result<NodeId> {
        let su = self.shape(u).to_vec();
        let sa = self.shape(a).to_vec();
        let ok = su.len() == 3
            && self.shape(dt) == su.as_slice()
            && sa.len() == 2
            && sa[0] == su[2]
            && self.shape(bm) == [su[0], su[1], sa[1]]
            && self.shape(cm) == [su[0], su[1], sa[1]];
        if !ok {
            return Err(Error::shape(
                "selective_scan",
                format!("u {su:?}, dt {:?}, A {sa:?}, B {:?}, C {:?}", self.shape(dt), self.shape(bm), self.shape(cm)),
            ));
        }
        let (bsz, len, d, n) = (su[0], su[1], su[2], sa[1]);
        let (uv, dtv, av, bv, cv) = (
            self.value(u).data(),
            self.value(dt).data(),
            self.value(a).data(),
            self.value(bm).data(),
            self.value(cm).data(),
        );
        let mut states = vec![0.0; bsz * len * d * n];
        let mut y = vec![0.0; bsz * len * d];
        for bi in 0..bsz {
            for t in 0..len {
                let bt = &bv[(bi * len + t) * n..(bi * len + t + 1) * n];
                let ct = &cv[(bi * len + t) * n..(bi * len + t + 1) * n];
                for c in 0..d {
                    let idx = (bi * len + t) * d + c;
                    let (step, x) = (dtv[idx], uv[idx]);
                    let mut acc = 0.0;
                    for s in 0..n {
                        let prev = if t == 0 { 0.0 } else { states[((bi * len + t - 1) * d + c) * n + s] };
                        let h = (step * av[c * n + s]).exp() * prev + step * bt[s] * x;
                        states[idx * n + s] = h;
                        acc += ct[s] * h;
                    }
                    y[idx] = acc;
                }
            }
        }
        let g = self.any_grad(&[u, dt, a, bm, cm]);
        let cache = ScanCache { u, dt, a, bm, cm, states };
        Ok(self.push(Tensor::new(su, y)?, Op::SelectiveScan(Box::new(cache)), g))
    }

    // ---- backward ---------------------------------------------------------

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.requires_grad(loss) {
            grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(go) = grads[i].take() else { continue };
            self.propagate(i, &go, &mut grads)?;
            grads[i] = Some(go);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.clone().map(|name| (i, name)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, go: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let god = go.data();
        let mut acc = |id: NodeId, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(self.nodes[id.0].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &|ga| reduce_into(ga, god, 1.0));
                acc(*b, &|gb| reduce_into(gb, god, sign));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|ga| {
                    let n = ga.len();
                    for (j, g) in god.iter().enumerate() {
                        ga[j % n] += g * vb[j % vb.len()];
                    }
                });
                acc(*b, &|gb| {
                    let n = gb.len();
                    for (j, g) in god.iter().enumerate() {
                        gb[j % n] += g * va[j % va.len()];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|ga| {
                for (x, g) in ga.iter_mut().zip(god) {
                    *x += g * c;
                }
            }),
            Op::Unary(a, kind) => {
                let xv = self.value(*a).data();
                let yv = out.data();
                acc(*a, &|ga| {
                    for j in 0..ga.len() {
                        ga[j] += god[j] * kind.derivative(xv[j], yv[j]);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batched = sb.len() > 2;
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|ga| {
                    // dA = dC B^T
                    for bi in 0..batch {
                        let boff = if batched { bi * k * n } else { 0 };
                        gemm_bt(&god[bi * m * n..], &vb[boff..], &mut ga[bi * m * k..], m, n, k);
                    }
                });
                acc(*b, &|gb| {
                    // dB = A^T dC
                    if batched {
                        for bi in 0..batch {
                            gemm_at(&va[bi * m * k..], &god[bi * m * n..], &mut gb[bi * k * n..], m, k, n);
                        }
                    } else {
                        gemm_at(va, god, gb, batch * m, k, n);
                    }
                });
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let back = permute_tensor(go, &inv);
                acc(*a, &|ga| add_slice(ga, back.data()));
            }
            Op::Reshape(a) => acc(*a, &|ga| add_slice(ga, god)),
            Op::Slice { a, axis, start } => {
                let shape = self.shape(*a);
                let (outer, n, inner) = split_axis(shape, *axis);
                let len = out.shape()[*axis];
                acc(*a, &|ga| {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        add_slice(&mut ga[base..base + len * inner], &god[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &id in inputs {
                    let n = self.shape(id)[*axis];
                    acc(id, &|gi| {
                        for o in 0..outer {
                            let src = &god[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            add_slice(&mut gi[o * n * inner..(o + 1) * n * inner], src);
                        }
                    });
                    offset += n;
                }
            }
            Op::Reduce { a, axis, mean } => {
                let (outer, n, inner) = split_axis(self.shape(*a), *axis);
                let f = if *mean { 1.0 / n as f64 } else { 1.0 };
                acc(*a, &|ga| {
                    for o in 0..outer {
                        for j in 0..n {
                            let dst = &mut ga[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (d, g) in dst.iter_mut().zip(&god[o * inner..(o + 1) * inner]) {
                                *d += g * f;
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &|ga| ga.iter_mut().for_each(|x| *x += god[0])),
            Op::Softmax(a) => {
                let d = out.last_dim();
                acc(*a, &|ga| {
                    for r in 0..ga.len() / d {
                        let y = out.row(r);
                        let g = &god[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(g).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            ga[r * d + j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let d = out.last_dim();
                acc(*a, &|ga| {
                    for r in 0..ga.len() / d {
                        let y = out.row(r);
                        let g = &god[r * d..(r + 1) * d];
                        let s: f64 = g.iter().sum();
                        for j in 0..d {
                            ga[r * d + j] += g[j] - y[j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = out.last_dim();
                let gv = self.value(*gamma).data();
                acc(*x, &|gx| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let range = r * d..(r + 1) * d;
                        let dxh: Vec<f64> = god[range.clone()].iter().zip(gv).map(|(g, w)| g * w).collect();
                        let sum: f64 = dxh.iter().sum();
                        let dot: f64 = dxh.iter().zip(&xhat[range.clone()]).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] += rs / d as f64 * (d as f64 * dxh[j] - sum - xhat[r * d + j] * dot);
                        }
                    }
                });
                acc(*gamma, &|gg| {
                    for (j, g) in god.iter().enumerate() {
                        gg[j % d] += g * xhat[j];
                    }
                });
                acc(*beta, &|gb| {
                    for (j, g) in god.iter().enumerate() {
                        gb[j % d] += g;
                    }
                });
            }
            Op::BatchNorm(c) => {
                let ch = out.last_dim();
                let rows = out.numel() / ch;
                let gv = self.value(c.gamma).data();
                acc(c.x, &|gx| {
                    if c.train {
                        let mut sum = vec![0.0; ch];
                        let mut dot = vec![0.0; ch];
                        for r in 0..rows {
                            for j in 0..ch {
                                let dxh = god[r * ch + j] * gv[j];
                                sum[j] += dxh;
                                dot[j] += dxh * c.xhat[r * ch + j];
                            }
                        }
                        let nf = rows as f64;
                        for r in 0..rows {
                            for j in 0..ch {
                                let dxh = god[r * ch + j] * gv[j];
                                gx[r * ch + j] += c.rstd[j] / nf * (nf * dxh - sum[j] - c.xhat[r * ch + j] * dot[j]);
                            }
                        }
                    } else {
                        for (j, g) in god.iter().enumerate() {
                            gx[j] += g * gv[j % ch] * c.rstd[j % ch];
                        }
                    }
                });
                acc(c.gamma, &|gg| {
                    for (j, g) in god.iter().enumerate() {
                        gg[j % ch] += g * c.xhat[j];
                    }
                });
                acc(c.beta, &|gb| {
                    for (j, g) in god.iter().enumerate() {
                        gb[j % ch] += g;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = out.last_dim();
                acc(*table, &|gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_slice(&mut gt[id * d..(id + 1) * d], &god[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let v = self.value(*logits).last_dim();
                let scale = god[0] / *count as f64;
                acc(*logits, &|gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for j in 0..v {
                            gl[r * v + j] += scale * probs[r * v + j];
                        }
                        gl[r * v + t] -= scale;
                    }
                });
            }
            Op::L2Normalize { a, norms } => {
                let d = out.last_dim();
                acc(*a, &|ga| {
                    for (r, nrm) in norms.iter().enumerate() {
                        let y = out.row(r);
                        let g = &god[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(g).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            ga[r * d + j] += (g[j] - y[j] * dot) / nrm;
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, pad_left } => self.conv1d_backward(out, god, *x, *w, *b, *pad_left, &mut acc),
            Op::LongConv { x, filter, causal } => {
                let s = self.shape(*x);
                let (bsz, len, d) = (s[0], s[1], s[2]);
                let gys = channel_signals(god, bsz, len, d);
                acc(*x, &|gx| {
                    let hs = filter_signals(self.value(*filter).data(), len, d, *causal);
                    // dx[u] = sum_t dy[t] h[t - u]
                    let dx = correlate_many(&gys, &hs, |n| (0..len).map(|u| u % n).collect());
                    add_slice(gx, &from_channel_signals(&dx, bsz, len, d));
                });
                acc(*filter, &|gf| {
                    let xs = channel_signals(self.value(*x).data(), bsz, len, d);
                    // dh[s] = sum_t dy[t] x[t - s]; offsets map to circular indices
                    let offsets: Vec<isize> = if *causal {
                        (0..len as isize).collect()
                    } else {
                        (-(len as isize - 1)..len as isize).collect()
                    };
                    let dh = correlate_many(&gys, &xs, |n| offsets.iter().map(|&o| o.rem_euclid(n as isize) as usize).collect());
                    let rows = offsets.len();
                    for (sig, vals) in dh.iter().enumerate() {
                        let c = sig % d;
                        for (r, v) in vals.iter().enumerate() {
                            gf[r * d + c] += v;
                        }
                    }
                    debug_assert_eq!(gf.len(), rows * d);
                });
            }
            Op::SelectiveScan(c) => self.scan_backward(c, god, &mut acc),
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv1d_backward(
        &self,
        out: &Tensor,
        god: &[f64],
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad_left: usize,
        acc: &mut impl FnMut(NodeId, &dyn Fn(&mut [f64])),
    ) {
        let sx = self.shape(x);
        let sw = self.shape(w);
        let (bsz, len, cin) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let lout = out.shape()[1];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        acc(b, &|gb| {
            for (j, g) in god.iter().enumerate() {
                gb[j % cout] += g;
            }
        });
        acc(x, &|gx| {
            let wt = kernel_major(wv, cout, cin, k);
            for bi in 0..bsz {
                for t in 0..lout {
                    let grow = &god[(bi * lout + t) * cout..(bi * lout + t + 1) * cout];
                    for j in 0..k {
                        let Some(src) = (t + j).checked_sub(pad_left).filter(|&s| s < len) else { continue };
                        let dst = &mut gx[(bi * len + src) * cin..(bi * len + src + 1) * cin];
                        // dst[c] += sum_o wt[j][c][o] * grow[o]
                        gemm_bt(grow, &wt[j * cin * cout..], dst, 1, cout, cin);
                    }
                }
            }
        });
        acc(w, &|gw| {
            for bi in 0..bsz {
                for t in 0..lout {
                    let grow = &god[(bi * lout + t) * cout..(bi * lout + t + 1) * cout];
                    for j in 0..k {
                        let Some(src) = (t + j).checked_sub(pad_left).filter(|&s| s < len) else { continue };
                        let xrow = &xv[(bi * len + src) * cin..(bi * len + src + 1) * cin];
                        for o in 0..cout {
                            let g = grow[o];
                            if g == 0.0 {
                                continue;
                            }
                            for c in 0..cin {
                                gw[(o * cin + c) * k + j] += g * xrow[c];
                            }
                        }
                    }
                }
            }
        });
    }

    fn scan_backward(&self, c: &ScanCache, god: &[f64], acc: &mut impl FnMut(NodeId, &dyn Fn(&mut [f64]))) {
        let su = self.shape(c.u);
        let (bsz, len, d) = (su[0], su[1], su[2]);
        let n = self.shape(c.a)[1];
        let (uv, dtv, av, bv, cv) = (
            self.value(c.u).data(),
            self.value(c.dt).data(),
            self.value(c.a).data(),
            self.value(c.bm).data(),
            self.value(c.cm).data(),
        );
        let mut gu = vec![0.0; uv.len()];
        let mut gdt = vec![0.0; dtv.len()];
        let mut ga = vec![0.0; av.len()];
        let mut gb = vec![0.0; bv.len()];
        let mut gc = vec![0.0; cv.len()];
        let mut gh = vec![0.0; d * n];
        for bi in 0..bsz {
            gh.iter_mut().for_each(|v| *v = 0.0);
            for t in (0..len).rev() {
                let row = bi * len + t;
                for ch in 0..d {
                    let idx = row * d + ch;
                    let (step, x, dy) = (dtv[idx], uv[idx], god[idx]);
                    for s in 0..n {
                        let h = c.states[idx * n + s];
                        let prev = if t == 0 { 0.0 } else { c.states[((row - 1) * d + ch) * n + s] };
                        let g = gh[ch * n + s] + dy * cv[row * n + s];
                        gc[row * n + s] += dy * h;
                        let a = av[ch * n + s];
                        let decay = (step * a).exp();
                        let bt = bv[row * n + s];
                        gdt[idx] += g * (a * decay * prev + bt * x);
                        ga[ch * n + s] += g * step * decay * prev;
                        gb[row * n + s] += g * step * x;
                        gu[idx] += g * step * bt;
                        gh[ch * n + s] = g * decay;
                    }
                }
            }
        }
        acc(c.u, &|dst| add_slice(dst, &gu));
        acc(c.dt, &|dst| add_slice(dst, &gdt));
        acc(c.a, &|dst| add_slice(dst, &ga));
        acc(c.bm, &|dst| add_slice(dst, &gb));
        acc(c.cm, &|dst| add_slice(dst, &gc));
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, String)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; `None` for nodes that do not
    /// require gradients or do not influence the loss.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradients keyed by parameter name, summed over repeated bindings.
    pub fn by_param(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (i, name) in &self.params {
            let Some(g) = &self.grads[*i] else { continue };
            match out.get_mut(name) {
                Some(t) => t.add_assign(g),
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }
}

// ---- kernels ----------------------------------------------------------------

/// `c[m, n] += a[m, k] * b[k, n]`
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m, k] += a[m, n] * b[k, n]^T`
fn gemm_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k, n] += a[m, k]^T * b[m, n]`
fn gemm_at(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Rearranges conv weights `[Cout, Cin, K]` into `[K, Cin, Cout]`.
fn kernel_major(w: &[f64], cout: usize, cin: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for o in 0..cout {
        for c in 0..cin {
            for j in 0..k {
                out[(j * cin + c) * cout + o] = w[(o * cin + c) * k + j];
            }
        }
    }
    out
}

fn add_slice(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Accumulates `sign * src` into `dst`, summing over broadcast leading dims.
fn reduce_into(dst: &mut [f64], src: &[f64], sign: f64) {
    let n = dst.len();
    for (j, g) in src.iter().enumerate() {
        dst[j % n] += sign * g;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_row(r: &[f64], out: &mut [f64]) {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, x) in out.iter_mut().zip(r) {
        *o = (x - m).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn row_map(t: &Tensor, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
    let d = t.last_dim();
    let mut out = vec![0.0; t.numel()];
    for (r, chunk) in out.chunks_mut(d).enumerate() {
        f(t.row(r), chunk);
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let shape = t.shape();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let src = t.data();
    for _ in 0..n {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permutation preserves size")
}

/// Splits `[B, L, D]` data into `B * D` length-`L` signals, ordered `(b, d)`.
fn channel_signals(data: &[f64], bsz: usize, len: usize, d: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; len]; bsz * d];
    for bi in 0..bsz {
        for t in 0..len {
            for c in 0..d {
                out[bi * d + c][t] = data[(bi * len + t) * d + c];
            }
        }
    }
    out
}

fn from_channel_signals(sig: &[Vec<f64>], bsz: usize, len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; bsz * len * d];
    for bi in 0..bsz {
        for c in 0..d {
            for t in 0..len {
                out[(bi * len + t) * d + c] = sig[bi * d + c][t];
            }
        }
    }
    out
}

/// Per-channel filters as `(offset, value)` lists.
fn filter_signals(data: &[f64], len: usize, d: usize, causal: bool) -> Vec<Vec<(isize, f64)>> {
    let rows = if causal { len } else { 2 * len - 1 };
    let first = if causal { 0 } else { -(len as isize - 1) };
    (0..d)
        .map(|c| (0..rows).map(|r| (first + r as isize, data[r * d + c])).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn square_has_derivative_two_x() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn detached_tensor_has_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(2.0));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.wrt(d).is_none());
        assert_eq!(grads.wrt(x).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn uniform_logits_give_log_vocab_cross_entropy() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[3, 7]));
        let loss = g.cross_entropy(logits, &[Some(0), Some(6), Some(3)]).unwrap();
        assert!((g.value(loss).item() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn same_padding_conv_keeps_length() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 20, 3]));
        let w = g.constant(Tensor::zeros(&[4, 3, 5]));
        let b = g.constant(Tensor::zeros(&[4]));
        let y = g.conv1d(x, w, b, 2, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 20, 4]);
    }

    #[test]
    fn matmul_shape_errors_name_dims() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn long_conv_matches_direct_sum() {
        let mut g = Graph::new();
        let xs: Vec<f64> = (0..2 * 5 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let causal: Vec<f64> = (0..5 * 2).map(|i| (i as f64 * 0.11).cos()).collect();
        let full: Vec<f64> = (0..9 * 2).map(|i| (i as f64 * 0.23).cos()).collect();
        let x = g.constant(t(&[2, 5, 2], &xs));
        let hc = g.constant(t(&[5, 2], &causal));
        let hf = g.constant(t(&[9, 2], &full));
        let yc = g.long_conv(x, hc, true).unwrap();
        let yf = g.long_conv(x, hf, false).unwrap();
        for b in 0..2 {
            for tt in 0..5 {
                for c in 0..2 {
                    let mut sc = 0.0;
                    let mut sf = 0.0;
                    for u in 0..5 {
                        let xv = xs[(b * 5 + u) * 2 + c];
                        let off = tt as isize - u as isize;
                        if off >= 0 {
                            sc += causal[off as usize * 2 + c] * xv;
                        }
                        sf += full[(off + 4) as usize * 2 + c] * xv;
                    }
                    assert!((g.value(yc).data()[(b * 5 + tt) * 2 + c] - sc).abs() < 1e-12);
                    assert!((g.value(yf).data()[(b * 5 + tt) * 2 + c] - sf).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[4, 6], |i| (i as f64).sin() * 10.0));
        let y = g.softmax(x);
        for r in 0..4 {
            assert!((g.value(y).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardises_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[3, 8], |i| (i as f64 * 1.7).cos() * 4.0 + 2.0));
        let gamma = g.constant(Tensor::full(&[8], 1.0));
        let beta = g.constant(Tensor::zeros(&[8]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for r in 0..3 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
