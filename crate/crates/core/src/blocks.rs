//! The five block kinds, each mapping `(B, L, dim_in)` to `(B, L, dim_out)`.
//!
//! A [`Block`] is structure only; its tensors live in a [`ParamStore`] under
//! names prefixed by the block key, so several models can share them.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
const MASK_NEG: f64 = -1e30;

/// Block kinds in the column order used by the architecture encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockKind {
    #[serde(rename = "CNN")]
    Cnn,
    #[serde(rename = "HYENA")]
    Hyena,
    #[serde(rename = "TRANSFORMER")]
    Transformer,
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "MAMBA")]
    Mamba,
}

impl BlockKind {
    pub const ALL: [BlockKind; 5] =
        [BlockKind::Cnn, BlockKind::Hyena, BlockKind::Transformer, BlockKind::Lstm, BlockKind::Mamba];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Cnn => "CNN",
            BlockKind::Hyena => "HYENA",
            BlockKind::Transformer => "TRANSFORMER",
            BlockKind::Lstm => "LSTM",
            BlockKind::Mamba => "MAMBA",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s) || (s.eq_ignore_ascii_case("TR") && *k == BlockKind::Transformer))
            .ok_or_else(|| Error::Config(format!("unknown block kind {s:?}")))
    }
}

/// Identity of a shareable block: kind plus input and output width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockKey {
    pub kind: BlockKind,
    pub dim_in: usize,
    pub dim_out: usize,
}

impl fmt::Display for BlockKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}_{}", self.kind, self.dim_in, self.dim_out)
    }
}

impl FromStr for BlockKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad block key {s:?}, expected KIND_in_out"));
        let mut it = s.rsplitn(3, '_');
        let dim_out = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let dim_in = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let kind = it.next().ok_or_else(bad)?.parse()?;
        Ok(BlockKey { kind, dim_in, dim_out })
    }
}

/// Fixed per-kind hyperparameters shared by every block of a search space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockOptions {
    /// Convolution kernel, 5 or 9.
    pub cnn_kernel: usize,
    /// Attention head width; heads = dim_out / head_dim.
    pub head_dim: usize,
    pub ffn_mult: usize,
    pub lstm_dropout: f64,
    pub mamba_state: usize,
    pub hyena_filter_features: usize,
    pub hyena_filter_hidden: usize,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            cnn_kernel: 5,
            head_dim: 64,
            ffn_mult: 4,
            lstm_dropout: 0.4,
            mamba_state: 8,
            hyena_filter_features: 8,
            hyena_filter_hidden: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub key: BlockKey,
    pub options: BlockOptions,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, dim_in: usize, dim_out: usize) -> Self {
        Self { key: BlockKey { kind, dim_in, dim_out }, options: BlockOptions::default() }
    }

    pub fn with_options(mut self, options: BlockOptions) -> Self {
        self.options = options;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let BlockKey { kind, dim_in, dim_out } = self.key;
        if dim_in == 0 || dim_out == 0 {
            return Err(Error::Config(format!("{}: dimensions must be positive", self.key)));
        }
        let o = &self.options;
        match kind {
            BlockKind::Cnn if o.cnn_kernel.is_multiple_of(2) => {
                Err(Error::Config(format!("{}: kernel {} must be odd", self.key, o.cnn_kernel)))
            }
            BlockKind::Transformer if o.head_dim == 0 || dim_out % o.head_dim != 0 => Err(Error::Config(format!(
                "{}: dim_out {dim_out} is not divisible by the head width {}",
                self.key, o.head_dim
            ))),
            BlockKind::Lstm if !(0.0..1.0).contains(&o.lstm_dropout) => {
                Err(Error::Config(format!("{}: dropout {} outside [0, 1)", self.key, o.lstm_dropout)))
            }
            _ => Ok(()),
        }
    }

    pub fn heads(&self) -> usize {
        self.key.dim_out / self.options.head_dim
    }
}

/// Per-forward state: mode, causality, dropout randomness and the batch-norm
/// nodes whose statistics should update running averages.
pub struct ForwardCtx<'a> {
    pub train: bool,
    pub causal: bool,
    pub rng: &'a mut ChaCha8Rng,
    pub bn_updates: Vec<(String, NodeId)>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(train: bool, causal: bool, rng: &'a mut ChaCha8Rng) -> Self {
        Self { train, causal, rng, bn_updates: Vec::new() }
    }
}

/// Folds training-mode batch statistics into running averages.
pub fn apply_bn_updates(g: &Graph, params: &mut ParamStore, updates: &[(String, NodeId)]) -> Result<()> {
    for (prefix, node) in updates {
        let Some(stats) = g.batch_stats(*node) else { continue };
        let unbias = if stats.count > 1 { stats.count as f64 / (stats.count - 1) as f64 } else { 1.0 };
        let mean = params.get_mut(&format!("{prefix}.running_mean"))?;
        for (r, m) in mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let var = params.get_mut(&format!("{prefix}.running_var"))?;
        for (r, v) in var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
        }
    }
    Ok(())
}

// ---- initialisation helpers ------------------------------------------------

pub(crate) fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Square orthogonal matrix from Gram-Schmidt on a Gaussian draw.
fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let mut q: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect()).collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = q[i].iter().zip(&q[j]).map(|(a, b)| a * b).sum();
                let qj = q[j].clone();
                for (a, b) in q[i].iter_mut().zip(&qj) {
                    *a -= dot * b;
                }
            }
            let norm = q[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            q[i].iter_mut().for_each(|a| *a /= norm);
        }
        if ok {
            return q.concat();
        }
    }
}

pub(crate) fn linear_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) {
    store.insert(format!("{name}.w"), xavier(rng, &[din, dout], din, dout));
    store.insert(format!("{name}.b"), Tensor::zeros(&[dout]));
}

pub(crate) fn linear(g: &mut Graph, p: &ParamStore, name: &str, x: NodeId) -> Result<NodeId> {
    let w = p.bind(g, &format!("{name}.w"))?;
    let b = p.bind(g, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn norm_params(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(format!("{name}.gamma"), Tensor::full(&[d], 1.0));
    store.insert(format!("{name}.beta"), Tensor::zeros(&[d]));
}

pub(crate) fn layer_norm(g: &mut Graph, p: &ParamStore, name: &str, x: NodeId) -> Result<NodeId> {
    let gamma = p.bind(g, &format!("{name}.gamma"))?;
    let beta = p.bind(g, &format!("{name}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

// ---- blocks ------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub spec: BlockSpec,
    prefix: String,
}

/// Creates the block and its freshly initialised tensors.
pub fn build_block(spec: BlockSpec, rng: &mut ChaCha8Rng) -> Result<(Block, ParamStore)> {
    let block = Block::new(spec)?;
    let params = block.init(rng);
    Ok((block, params))
}

impl Block {
    pub fn new(spec: BlockSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { prefix: spec.key.to_string(), spec })
    }

    pub fn key(&self) -> BlockKey {
        self.spec.key
    }

    /// Parameter-name prefix; every tensor of this block starts with it.
    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    fn has_proj(&self) -> bool {
        self.spec.key.dim_in != self.spec.key.dim_out
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamStore {
        let BlockKey { kind, dim_in: din, dim_out: d } = self.spec.key;
        let o = self.spec.options;
        let mut s = ParamStore::new();
        match kind {
            BlockKind::Cnn => {
                let k = o.cnn_kernel;
                s.insert(self.name("conv.w"), xavier(rng, &[d, din, k], din * k, d * k));
                s.insert(self.name("conv.b"), Tensor::zeros(&[d]));
                norm_params(&mut s, &self.name("bn"), d);
                s.insert(self.name("bn.running_mean"), Tensor::zeros(&[d]));
                s.insert(self.name("bn.running_var"), Tensor::full(&[d], 1.0));
            }
            BlockKind::Lstm => {
                s.insert(self.name("w_ih"), xavier(rng, &[din, 4 * d], din, 4 * d));
                // One orthogonal square per gate, laid side by side.
                let gates: Vec<Vec<f64>> = (0..4).map(|_| orthogonal(rng, d)).collect();
                let w_hh = Tensor::from_fn(&[d, 4 * d], |i| {
                    let (r, c) = (i / (4 * d), i % (4 * d));
                    gates[c / d][r * d + c % d]
                });
                s.insert(self.name("w_hh"), w_hh);
                s.insert(self.name("b"), Tensor::zeros(&[4 * d]));
            }
            BlockKind::Transformer => {
                if self.has_proj() {
                    linear_params(&mut s, rng, &self.name("in_proj"), din, d);
                }
                norm_params(&mut s, &self.name("ln1"), d);
                for part in ["q", "k", "v", "o"] {
                    linear_params(&mut s, rng, &self.name(part), d, d);
                }
                norm_params(&mut s, &self.name("ln2"), d);
                linear_params(&mut s, rng, &self.name("ffn1"), d, o.ffn_mult * d);
                linear_params(&mut s, rng, &self.name("ffn2"), o.ffn_mult * d, d);
            }
            BlockKind::Mamba => {
                let n = o.mamba_state;
                if self.has_proj() {
                    linear_params(&mut s, rng, &self.name("proj"), din, d);
                }
                norm_params(&mut s, &self.name("ln"), d);
                linear_params(&mut s, rng, &self.name("x"), d, d);
                linear_params(&mut s, rng, &self.name("z"), d, d);
                linear_params(&mut s, rng, &self.name("dt"), d, d);
                // Softplus(-2) ~ 0.13: start with moderate step sizes.
                s.insert(self.name("dt.b"), Tensor::full(&[d], -2.0));
                linear_params(&mut s, rng, &self.name("bproj"), d, n);
                linear_params(&mut s, rng, &self.name("cproj"), d, n);
                s.insert(self.name("a_log"), Tensor::from_fn(&[d, n], |i| ((i % n) as f64 + 1.0).ln()));
                s.insert(self.name("d_skip"), Tensor::full(&[d], 1.0));
                linear_params(&mut s, rng, &self.name("out"), d, d);
            }
            BlockKind::Hyena => {
                let (f, h) = (o.hyena_filter_features, o.hyena_filter_hidden);
                if self.has_proj() {
                    linear_params(&mut s, rng, &self.name("proj"), din, d);
                }
                linear_params(&mut s, rng, &self.name("gate"), d, d);
                linear_params(&mut s, rng, &self.name("value"), d, d);
                linear_params(&mut s, rng, &self.name("filter1"), 1 + 2 * f, h);
                linear_params(&mut s, rng, &self.name("filter2"), h, d);
                linear_params(&mut s, rng, &self.name("out"), d, d);
            }
        }
        s
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        let key = self.spec.key;
        if shape.len() != 3 || shape[2] != key.dim_in {
            return Err(Error::shape("block", format!("{key} expects (B, L, {}), got {shape:?}", key.dim_in)));
        }
        match key.kind {
            BlockKind::Cnn => self.cnn(g, p, x, ctx),
            BlockKind::Lstm => self.lstm(g, p, x, ctx),
            BlockKind::Transformer => self.transformer(g, p, x, ctx),
            BlockKind::Mamba => self.mamba(g, p, x),
            BlockKind::Hyena => self.hyena(g, p, x, ctx),
        }
    }

    fn cnn(&self, g: &mut Graph, p: &ParamStore, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let k = self.spec.options.cnn_kernel;
        let (left, right) = if ctx.causal { (k - 1, 0) } else { ((k - 1) / 2, (k - 1) / 2) };
        let w = p.bind(g, &self.name("conv.w"))?;
        let b = p.bind(g, &self.name("conv.b"))?;
        let y = g.conv1d(x, w, b, left, right)?;
        let y = g.relu(y);
        let gamma = p.bind(g, &self.name("bn.gamma"))?;
        let beta = p.bind(g, &self.name("bn.beta"))?;
        if ctx.train {
            let out = g.batch_norm(y, gamma, beta, None)?;
            ctx.bn_updates.push((self.name("bn"), out));
            Ok(out)
        } else {
            let mean = p.get(&self.name("bn.running_mean"))?.data().to_vec();
            let var = p.get(&self.name("bn.running_var"))?.data().to_vec();
            g.batch_norm(y, gamma, beta, Some((&mean, &var)))
        }
    }

    fn lstm(&self, g: &mut Graph, p: &ParamStore, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let (bsz, len) = (g.shape(x)[0], g.shape(x)[1]);
        let d = self.spec.key.dim_out;
        let w_ih = p.bind(g, &self.name("w_ih"))?;
        let w_hh = p.bind(g, &self.name("w_hh"))?;
        let b = p.bind(g, &self.name("b"))?;
        let xw = g.matmul(x, w_ih)?;
        let xw = g.add(xw, b)?;
        let mut h = g.constant(Tensor::zeros(&[bsz, d]));
        let mut c = g.constant(Tensor::zeros(&[bsz, d]));
        let mut outputs = Vec::with_capacity(len);
        for t in 0..len {
            let xt = g.slice(xw, 1, t, 1)?;
            let xt = g.reshape(xt, &[bsz, 4 * d])?;
            let hw = g.matmul(h, w_hh)?;
            let gates = g.add(xt, hw)?;
            let i = g.slice(gates, 1, 0, d)?;
            let f = g.slice(gates, 1, d, d)?;
            let gg = g.slice(gates, 1, 2 * d, d)?;
            let o = g.slice(gates, 1, 3 * d, d)?;
            let (i, f, gg, o) = (g.sigmoid(i), g.sigmoid(f), g.tanh(gg), g.sigmoid(o));
            let fc = g.mul(f, c)?;
            let ig = g.mul(i, gg)?;
            c = g.add(fc, ig)?;
            let tc = g.tanh(c);
            h = g.mul(o, tc)?;
            outputs.push(g.reshape(h, &[bsz, 1, d])?);
        }
        let out = g.concat(&outputs, 1)?;
        if ctx.train {
            g.dropout(out, self.spec.options.lstm_dropout, ctx.rng)
        } else {
            Ok(out)
        }
    }

    fn transformer(&self, g: &mut Graph, p: &ParamStore, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let (bsz, len) = (g.shape(x)[0], g.shape(x)[1]);
        let d = self.spec.key.dim_out;
        let heads = self.spec.heads();
        let hd = self.spec.options.head_dim;
        let x = if self.has_proj() { linear(g, p, &self.name("in_proj"), x)? } else { x };
        let n1 = layer_norm(g, p, &self.name("ln1"), x)?;
        let split = |g: &mut Graph, t: NodeId| -> Result<NodeId> {
            let t = g.reshape(t, &[bsz, len, heads, hd])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, &[bsz * heads, len, hd])
        };
        let q = linear(g, p, &self.name("q"), n1)?;
        let k = linear(g, p, &self.name("k"), n1)?;
        let v = linear(g, p, &self.name("v"), n1)?;
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let mut scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
        if ctx.causal {
            let mask = g.constant(Tensor::from_fn(&[len, len], |i| if i % len > i / len { MASK_NEG } else { 0.0 }));
            scores = g.add(scores, mask)?;
        }
        let att = g.softmax(scores);
        let ctxv = g.matmul(att, v)?;
        let ctxv = g.reshape(ctxv, &[bsz, heads, len, hd])?;
        let ctxv = g.permute(ctxv, &[0, 2, 1, 3])?;
        let ctxv = g.reshape(ctxv, &[bsz, len, d])?;
        let attn_out = linear(g, p, &self.name("o"), ctxv)?;
        let h = g.add(x, attn_out)?;
        let n2 = layer_norm(g, p, &self.name("ln2"), h)?;
        let f = linear(g, p, &self.name("ffn1"), n2)?;
        let f = g.relu(f);
        let f = linear(g, p, &self.name("ffn2"), f)?;
        g.add(h, f)
    }

    fn mamba(&self, g: &mut Graph, p: &ParamStore, x: NodeId) -> Result<NodeId> {
        let r = if self.has_proj() { linear(g, p, &self.name("proj"), x)? } else { x };
        let u = layer_norm(g, p, &self.name("ln"), r)?;
        let xs = linear(g, p, &self.name("x"), u)?;
        let xs = g.silu(xs);
        let z = linear(g, p, &self.name("z"), u)?;
        let dt = linear(g, p, &self.name("dt"), u)?;
        let dt = g.softplus(dt);
        let bm = linear(g, p, &self.name("bproj"), u)?;
        let cm = linear(g, p, &self.name("cproj"), u)?;
        let a_log = p.bind(g, &self.name("a_log"))?;
        let a = g.exp(a_log);
        let a = g.scale(a, -1.0);
        let y = g.selective_scan(xs, dt, a, bm, cm)?;
        let d_skip = p.bind(g, &self.name("d_skip"))?;
        let skip = g.mul(xs, d_skip)?;
        let y = g.add(y, skip)?;
        let gate = g.silu(z);
        let y = g.mul(y, gate)?;
        let y = linear(g, p, &self.name("out"), y)?;
        g.add(r, y)
    }

    /// Positional features for filter offsets, one row per offset.
    fn filter_features(&self, len: usize, causal: bool) -> Tensor {
        let f = self.spec.options.hyena_filter_features;
        let offsets: Vec<f64> = if causal {
            (0..len).map(|t| t as f64).collect()
        } else {
            (-(len as isize - 1)..len as isize).map(|t| t as f64).collect()
        };
        let width = 1 + 2 * f;
        let mut data = Vec::with_capacity(offsets.len() * width);
        for &t in &offsets {
            data.push(t / 64.0);
            for j in 1..=f {
                let w = std::f64::consts::PI * j as f64 / 64.0;
                data.push((w * t).sin());
                data.push((w * t).cos());
            }
        }
        Tensor::new(vec![offsets.len(), width], data).expect("feature layout")
    }

    /// Exponential decay over |offset|, with per-channel rates.
    fn filter_window(&self, len: usize, causal: bool) -> Tensor {
        let d = self.spec.key.dim_out;
        let rows = if causal { len } else { 2 * len - 1 };
        let first = if causal { 0.0 } else { -(len as f64 - 1.0) };
        Tensor::from_fn(&[rows, d], |i| {
            let (r, c) = (i / d, i % d);
            let t = (first + r as f64).abs();
            let rate = 0.01 + 0.3 * c as f64 / d.max(2) as f64;
            (-rate * t).exp()
        })
    }

    fn hyena(&self, g: &mut Graph, p: &ParamStore, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let len = g.shape(x)[1];
        let r = if self.has_proj() { linear(g, p, &self.name("proj"), x)? } else { x };
        let gate = linear(g, p, &self.name("gate"), r)?;
        let v = linear(g, p, &self.name("value"), r)?;
        let feats = g.constant(self.filter_features(len, ctx.causal));
        let hidden = linear(g, p, &self.name("filter1"), feats)?;
        let hidden = g.tanh(hidden);
        let filt = linear(g, p, &self.name("filter2"), hidden)?;
        let window = g.constant(self.filter_window(len, ctx.causal));
        let filt = g.mul(filt, window)?;
        let conv = g.long_conv(v, filt, ctx.causal)?;
        let y = g.mul(gate, conv)?;
        let y = linear(g, p, &self.name("out"), y)?;
        g.add(r, y)
    }
}
