//! Weight-sharing supernet: one block per unique key, uniform single-path
//! sampling, and self-supervised pretraining.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path as FsPath;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_checkpoint, save_checkpoint, AdamW, AdamWConfig, Graph, NodeId, ParamStore, Tensor};
use crate::blocks::{self, apply_bn_updates, Block, BlockKey, BlockOptions, BlockSpec, ForwardCtx};
use crate::error::{Error, Result};
use crate::space::Path;
use crate::tokenize::{MASK, PAD, SPECIALS};

pub const MAX_LEN: usize = 256;

/// Padded batch of token ids, `[batch, len]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    /// Keeps the first `max_len` tokens of each sequence and pads with PAD.
    pub fn new(seqs: &[Vec<usize>], max_len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len().min(max_len)).collect();
        if lengths.contains(&0) {
            return Err(Error::Config("empty token sequence in batch".into()));
        }
        let len = *lengths.iter().max().expect("non-empty");
        let mut ids = vec![PAD; seqs.len() * len];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * len..b * len + lengths[b]].copy_from_slice(&s[..lengths[b]]);
        }
        Ok(Self { ids, batch: seqs.len(), len, lengths })
    }

    pub fn get(&self, b: usize, t: usize) -> usize {
        self.ids[b * self.len + t]
    }

    /// `[batch, 1, len]` averaging weights over the unpadded positions.
    pub fn pool_weights(&self) -> Tensor {
        let (b_n, l_n) = (self.batch, self.len);
        Tensor::from_fn(&[b_n, 1, l_n], |i| {
            let (b, t) = (i / l_n, i % l_n);
            if t < self.lengths[b] {
                1.0 / self.lengths[b] as f64
            } else {
                0.0
            }
        })
    }
}

/// Mean over valid positions of `x: [B, L, D]`, giving `[B, D]`.
pub fn masked_mean_pool(g: &mut Graph, x: NodeId, batch: &TokenBatch) -> Result<NodeId> {
    let d = *g.shape(x).last().expect("rank 3");
    let w = g.constant(batch.pool_weights());
    let pooled = g.matmul(w, x)?;
    g.reshape(pooled, &[batch.batch, d])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SslObjective {
    Mm {
        #[serde(default = "default_mask_rate")]
        mask_rate: f64,
    },
    Cl {
        #[serde(default = "default_temperature")]
        temperature: f64,
        #[serde(default = "default_mask_rate")]
        mask_rate: f64,
        #[serde(default = "default_crop")]
        crop: f64,
    },
    Ntp,
}

fn default_mask_rate() -> f64 {
    0.15
}
fn default_temperature() -> f64 {
    0.1
}
fn default_crop() -> f64 {
    0.8
}

impl SslObjective {
    pub fn mm() -> Self {
        SslObjective::Mm { mask_rate: default_mask_rate() }
    }

    pub fn cl() -> Self {
        SslObjective::Cl { temperature: default_temperature(), mask_rate: default_mask_rate(), crop: default_crop() }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SslObjective::Mm { .. } => "mm",
            SslObjective::Cl { .. } => "cl",
            SslObjective::Ntp => "ntp",
        }
    }

    pub fn causal(&self) -> bool {
        matches!(self, SslObjective::Ntp)
    }

    pub fn validate(&self) -> Result<()> {
        let rate_ok = |r: f64| r > 0.0 && r < 1.0;
        match *self {
            SslObjective::Mm { mask_rate } if !rate_ok(mask_rate) => Err(Error::Config(format!("mask rate {mask_rate}"))),
            SslObjective::Cl { temperature, mask_rate, crop } => {
                if temperature.is_nan() || temperature <= 0.0 || !rate_ok(mask_rate) || !(0.0..=1.0).contains(&crop) || crop == 0.0 {
                    return Err(Error::Config(format!("contrastive settings τ={temperature} mask={mask_rate} crop={crop}")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "mm" => Ok(Self::mm()),
            "cl" => Ok(Self::cl()),
            "ntp" => Ok(SslObjective::Ntp),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

/// Sizes of the parts every path shares.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupernetConfig {
    pub h0: usize,
    /// Width every path output is adapted to before the shared heads.
    pub h_ref: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub options: BlockOptions,
}

impl SupernetConfig {
    /// `h_ref` is the widest path output.
    pub fn for_paths(paths: &[Path], h0: usize, vocab_size: usize) -> Self {
        let h_ref = paths.iter().map(Path::output_dim).max().unwrap_or(h0);
        Self { h0, h_ref, vocab_size, max_len: MAX_LEN, options: BlockOptions::default() }
    }

    pub fn with_options(mut self, options: BlockOptions) -> Self {
        self.options = options;
        self
    }
}

pub fn unique_keys(paths: &[Path], h0: usize) -> BTreeSet<BlockKey> {
    paths.iter().flat_map(|p| p.layers(h0)).collect()
}

fn adapter_name(width: usize) -> String {
    format!("adapter_{width}")
}

/// Shared blocks plus the parameters of every block and peripheral.
#[derive(Clone, Debug)]
pub struct BlockRegistry {
    blocks: BTreeMap<BlockKey, Arc<Block>>,
    pub params: ParamStore,
    pub config: SupernetConfig,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

fn init_peripherals(params: &mut ParamStore, cfg: &SupernetConfig, widths: &BTreeSet<usize>, rng: &mut ChaCha8Rng) {
    params.insert("embed.token", normal(rng, &[cfg.vocab_size, cfg.h0], 1.0));
    params.insert("embed.pos", normal(rng, &[cfg.max_len, cfg.h0], 0.1));
    for &w in widths {
        let name = adapter_name(w);
        blocks::linear_params(params, rng, &name, w, cfg.h_ref);
        params.insert(format!("{name}.ln.gamma"), Tensor::full(&[cfg.h_ref], 1.0));
        params.insert(format!("{name}.ln.beta"), Tensor::zeros(&[cfg.h_ref]));
    }
    params.insert("lm_head.w", normal(rng, &[cfg.h_ref, cfg.vocab_size], 0.02));
    params.insert("lm_head.b", Tensor::zeros(&[cfg.vocab_size]));
    blocks::linear_params(params, rng, "cl_proj", cfg.h_ref, cfg.h_ref);
}

/// Instantiates one block per unique key across `paths`, each initialised
/// once, plus the shared embedding, adapters and heads.
pub fn build_registry(paths: &[Path], config: SupernetConfig, seed: u64) -> Result<BlockRegistry> {
    if paths.is_empty() {
        return Err(Error::Config("no paths to build a supernet from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut blocks = BTreeMap::new();
    for key in unique_keys(paths, config.h0) {
        let block = Block::new(BlockSpec { key, options: config.options })?;
        params.extend_from(&block.init(&mut rng));
        blocks.insert(key, Arc::new(block));
    }
    let widths = paths.iter().map(Path::output_dim).collect();
    init_peripherals(&mut params, &config, &widths, &mut rng);
    Ok(BlockRegistry { blocks, params, config })
}

impl BlockRegistry {
    /// Block structure for `paths` without any tensors, for wiring models
    /// whose weights live elsewhere.
    pub fn skeleton(paths: &[Path], config: SupernetConfig) -> Result<Self> {
        let mut blocks = BTreeMap::new();
        for key in unique_keys(paths, config.h0) {
            blocks.insert(key, Arc::new(Block::new(BlockSpec { key, options: config.options })?));
        }
        Ok(Self { blocks, params: ParamStore::new(), config })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &BlockKey> {
        self.blocks.keys()
    }

    pub fn block(&self, key: &BlockKey) -> Result<&Arc<Block>> {
        self.blocks.get(key).ok_or_else(|| Error::MissingBlock(key.to_string()))
    }

    /// Tensors owned by one block.
    pub fn block_params(&self, key: &BlockKey) -> BTreeMap<String, Tensor> {
        let prefix = format!("{key}.");
        self.params.with_prefix(&prefix).map(|(n, t)| (n.clone(), t.clone())).collect()
    }

    pub fn save(&self, dir: &FsPath) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = RegistryMeta { config: self.config, keys: self.blocks.keys().map(|k| k.to_string()).collect() };
        let file = dir.join("registry.json");
        fs::write(&file, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&file, e))?;
        save_checkpoint(&self.params, &dir.join("weights"))
    }

    pub fn load(dir: &FsPath) -> Result<Self> {
        let file = dir.join("registry.json");
        if !file.exists() {
            return Err(Error::MissingCheckpoint(file.display().to_string()));
        }
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let meta: RegistryMeta = serde_json::from_str(&text)?;
        let mut blocks = BTreeMap::new();
        for k in &meta.keys {
            let key: BlockKey = k.parse()?;
            blocks.insert(key, Arc::new(Block::new(BlockSpec { key, options: meta.config.options })?));
        }
        let params = load_checkpoint(&dir.join("weights"))?;
        Ok(Self { blocks, params, config: meta.config })
    }
}

#[derive(Serialize, Deserialize)]
struct RegistryMeta {
    config: SupernetConfig,
    keys: Vec<String>,
}

/// One path wired to shared blocks.
#[derive(Clone, Debug)]
pub struct Model {
    pub path: Path,
    layers: Vec<Arc<Block>>,
    config: SupernetConfig,
}

pub fn assemble(registry: &BlockRegistry, path: &Path) -> Result<Model> {
    let layers = path
        .layers(registry.config.h0)
        .iter()
        .map(|k| registry.block(k).cloned())
        .collect::<Result<Vec<_>>>()?;
    Ok(Model { path: path.clone(), layers, config: registry.config })
}

impl Model {
    pub fn layers(&self) -> &[Arc<Block>] {
        &self.layers
    }

    pub fn config(&self) -> &SupernetConfig {
        &self.config
    }

    /// Block-stack output, `[B, L, h_d]`.
    pub fn features(&self, g: &mut Graph, p: &ParamStore, batch: &TokenBatch, ctx: &mut ForwardCtx) -> Result<NodeId> {
        if batch.len > self.config.max_len {
            return Err(Error::Config(format!("batch length {} exceeds {}", batch.len, self.config.max_len)));
        }
        let table = p.bind(g, "embed.token")?;
        let tok = g.embedding(table, &batch.ids, &[batch.batch, batch.len])?;
        let pos_table = p.bind(g, "embed.pos")?;
        let pos = g.slice(pos_table, 0, 0, batch.len)?;
        let mut x = g.add(tok, pos)?;
        for block in &self.layers {
            x = block.forward(g, p, x, ctx)?;
        }
        Ok(x)
    }

    /// Features mapped to the shared width, `[B, L, h_ref]`.
    pub fn hidden(&self, g: &mut Graph, p: &ParamStore, batch: &TokenBatch, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let x = self.features(g, p, batch, ctx)?;
        let name = adapter_name(self.path.output_dim());
        let y = blocks::linear(g, p, &name, x)?;
        blocks::layer_norm(g, p, &format!("{name}.ln"), y)
    }

    pub fn lm_logits(&self, g: &mut Graph, p: &ParamStore, batch: &TokenBatch, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let h = self.hidden(g, p, batch, ctx)?;
        blocks::linear(g, p, "lm_head", h)
    }
}

pub fn sample_path<'a>(paths: &'a [Path], rng: &mut impl Rng) -> Result<&'a Path> {
    if paths.is_empty() {
        return Err(Error::Config("cannot sample from an empty path list".into()));
    }
    Ok(&paths[rng.random_range(0..paths.len())])
}

/// 80/10/10 corruption of a `mask_rate` fraction of positions. Returns the
/// corrupted batch and per-position targets (`Some` only where selected).
pub fn mask_tokens(batch: &TokenBatch, mask_rate: f64, vocab_size: usize, rng: &mut impl Rng) -> (TokenBatch, Vec<Option<usize>>) {
    let n_special = SPECIALS.len();
    loop {
        let mut out = batch.clone();
        let mut targets = vec![None; batch.ids.len()];
        for b in 0..batch.batch {
            for t in 0..batch.lengths[b] {
                if rng.random::<f64>() >= mask_rate {
                    continue;
                }
                let i = b * batch.len + t;
                targets[i] = Some(batch.ids[i]);
                let r: f64 = rng.random();
                if r < 0.8 {
                    out.ids[i] = MASK;
                } else if r < 0.9 && vocab_size > n_special {
                    out.ids[i] = rng.random_range(n_special..vocab_size);
                }
            }
        }
        // Resample when nothing was selected.
        if targets.iter().any(Option::is_some) {
            return (out, targets);
        }
    }
}

pub fn mm_loss(
    model: &Model,
    g: &mut Graph,
    p: &ParamStore,
    batch: &TokenBatch,
    mask_rate: f64,
    ctx: &mut ForwardCtx,
) -> Result<NodeId> {
    let (corrupted, targets) = mask_tokens(batch, mask_rate, model.config.vocab_size, ctx.rng);
    masked_lm_loss(model, g, p, &corrupted, &targets, ctx)
}

/// Cross-entropy of the LM head against explicit per-position targets.
pub fn masked_lm_loss(
    model: &Model,
    g: &mut Graph,
    p: &ParamStore,
    input: &TokenBatch,
    targets: &[Option<usize>],
    ctx: &mut ForwardCtx,
) -> Result<NodeId> {
    let logits = model.lm_logits(g, p, input, ctx)?;
    g.cross_entropy(logits, targets)
}

pub fn ntp_targets(batch: &TokenBatch) -> Vec<Option<usize>> {
    let mut targets = vec![None; batch.ids.len()];
    for b in 0..batch.batch {
        for t in 0..batch.lengths[b].saturating_sub(1) {
            targets[b * batch.len + t] = Some(batch.get(b, t + 1));
        }
    }
    targets
}

/// Next-token cross-entropy; the model must run with a causal context.
pub fn ntp_loss(model: &Model, g: &mut Graph, p: &ParamStore, batch: &TokenBatch, ctx: &mut ForwardCtx) -> Result<NodeId> {
    if !ctx.causal {
        return Err(Error::Config("next-token loss needs a causal forward pass".into()));
    }
    let targets = ntp_targets(batch);
    if targets.iter().all(Option::is_none) {
        return Err(Error::Config("every sequence in the batch has length 1".into()));
    }
    masked_lm_loss(model, g, p, batch, &targets, ctx)
}

/// NT-Xent over `z: [2B, D]` where rows `i` and `i + B` are positives and
/// every other row is a negative.
pub fn nt_xent(g: &mut Graph, z: NodeId, temperature: f64) -> Result<NodeId> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 || shape[0] < 4 || !shape[0].is_multiple_of(2) {
        return Err(Error::Config(format!("contrastive loss needs [2B, D] with B >= 2, got {shape:?}")));
    }
    let n = shape[0];
    let zn = g.l2_normalize(z);
    let zt = g.transpose(zn)?;
    let sim = g.matmul(zn, zt)?;
    let sim = g.scale(sim, 1.0 / temperature);
    let diag = g.constant(Tensor::from_fn(&[n, n], |i| if i / n == i % n { -1e30 } else { 0.0 }));
    let logits = g.add(sim, diag)?;
    let targets: Vec<Option<usize>> = (0..n).map(|i| Some((i + n / 2) % n)).collect();
    g.cross_entropy(logits, &targets)
}

/// A random contiguous crop to `crop` of the length, then independent masking.
fn augment(ids: &[usize], crop: f64, mask_rate: f64, rng: &mut impl Rng) -> Vec<usize> {
    let keep = ((ids.len() as f64 * crop).ceil() as usize).clamp(1, ids.len());
    let start = rng.random_range(0..=ids.len() - keep);
    ids[start..start + keep].iter().map(|&t| if rng.random::<f64>() < mask_rate { MASK } else { t }).collect()
}

/// Pooled, projected embeddings of a batch, `[B, h_ref]`.
pub fn embed_pooled(model: &Model, g: &mut Graph, p: &ParamStore, batch: &TokenBatch, ctx: &mut ForwardCtx) -> Result<NodeId> {
    let h = model.hidden(g, p, batch, ctx)?;
    let pooled = masked_mean_pool(g, h, batch)?;
    blocks::linear(g, p, "cl_proj", pooled)
}

#[allow(clippy::too_many_arguments)]
pub fn cl_loss(
    model: &Model,
    g: &mut Graph,
    p: &ParamStore,
    batch: &TokenBatch,
    temperature: f64,
    mask_rate: f64,
    crop: f64,
    ctx: &mut ForwardCtx,
) -> Result<NodeId> {
    if batch.batch < 2 {
        return Err(Error::Config("contrastive loss needs at least two sequences".into()));
    }
    let rows: Vec<Vec<usize>> = (0..batch.batch).map(|b| batch.ids[b * batch.len..b * batch.len + batch.lengths[b]].to_vec()).collect();
    let mut views = Vec::with_capacity(2 * rows.len());
    for _ in 0..2 {
        for r in &rows {
            views.push(augment(r, crop, mask_rate, ctx.rng));
        }
    }
    let vb = TokenBatch::new(&views, model.config.max_len)?;
    let z = embed_pooled(model, g, p, &vb, ctx)?;
    nt_xent(g, z, temperature)
}

pub fn objective_loss(
    model: &Model,
    g: &mut Graph,
    p: &ParamStore,
    batch: &TokenBatch,
    objective: SslObjective,
    ctx: &mut ForwardCtx,
) -> Result<NodeId> {
    match objective {
        SslObjective::Mm { mask_rate } => mm_loss(model, g, p, batch, mask_rate, ctx),
        SslObjective::Cl { temperature, mask_rate, crop } => cl_loss(model, g, p, batch, temperature, mask_rate, crop, ctx),
        SslObjective::Ntp => ntp_loss(model, g, p, batch, ctx),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub objective: SslObjective,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl PretrainConfig {
    pub fn new(objective: SslObjective, steps: usize) -> Self {
        Self { objective, steps, batch_size: 16, seed: 0, optimizer: AdamWConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub path_id: String,
    pub loss: f64,
}

/// Resumable pretraining progress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainState {
    pub step: usize,
    pub optimizer: AdamW,
    pub trace: Vec<StepRecord>,
}

impl PretrainState {
    pub fn new(opt: AdamWConfig) -> Self {
        Self { step: 0, optimizer: AdamW::new(opt), trace: Vec::new() }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.loss).collect()
    }
}

/// Independent stream per step so a resumed run replays identically.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Samples one path and one batch, and updates only the tensors that took
/// part in the forward pass.
pub fn pretrain_step(
    registry: &mut BlockRegistry,
    paths: &[Path],
    corpus: &[Vec<usize>],
    cfg: &PretrainConfig,
    state: &mut PretrainState,
) -> Result<StepRecord> {
    let mut rng = step_rng(cfg.seed, state.step);
    let path = sample_path(paths, &mut rng)?;
    let model = assemble(registry, path)?;
    let rows: Vec<Vec<usize>> = (0..cfg.batch_size).map(|_| corpus[rng.random_range(0..corpus.len())].clone()).collect();
    let batch = TokenBatch::new(&rows, registry.config.max_len)?;
    let mut g = Graph::new();
    let mut ctx = ForwardCtx::new(true, cfg.objective.causal(), &mut rng);
    let loss = objective_loss(&model, &mut g, &registry.params, &batch, cfg.objective, &mut ctx)?;
    let value = g.value(loss).item();
    let updates = std::mem::take(&mut ctx.bn_updates);
    if !value.is_finite() {
        let mut trace = state.losses();
        trace.push(value);
        return Err(Error::Divergence { step: state.step, trace });
    }
    let grads = g.backward(loss)?.by_param();
    state.optimizer.step(&mut registry.params, &grads).map_err(|e| match e {
        Error::NonFiniteGradient { .. } => Error::Divergence { step: state.step, trace: state.losses() },
        other => other,
    })?;
    apply_bn_updates(&g, &mut registry.params, &updates)?;
    let record = StepRecord { step: state.step, path_id: path.path_id.clone(), loss: value };
    state.step += 1;
    state.trace.push(record.clone());
    Ok(record)
}

/// Runs until `cfg.steps` total steps have been taken.
pub fn pretrain(
    registry: &mut BlockRegistry,
    paths: &[Path],
    corpus: &[Vec<usize>],
    cfg: &PretrainConfig,
    state: &mut PretrainState,
) -> Result<()> {
    cfg.objective.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    while state.step < cfg.steps {
        pretrain_step(registry, paths, corpus, cfg, state)?;
    }
    Ok(())
}

pub fn save_pretrain(dir: &FsPath, registry: &BlockRegistry, state: &PretrainState) -> Result<()> {
    registry.save(dir)?;
    let file = dir.join("state.json");
    fs::write(&file, serde_json::to_vec(state)?).map_err(|e| Error::io(&file, e))
}

pub fn load_pretrain(dir: &FsPath) -> Result<(BlockRegistry, PretrainState)> {
    let registry = BlockRegistry::load(dir)?;
    let file = dir.join("state.json");
    if !file.exists() {
        return Err(Error::MissingCheckpoint(file.display().to_string()));
    }
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    Ok((registry, serde_json::from_str(&text)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_pads_and_truncates() {
        let b = TokenBatch::new(&[vec![5, 6, 7], vec![8]], 2).unwrap();
        assert_eq!((b.batch, b.len), (2, 2));
        assert_eq!(b.ids, vec![5, 6, 8, PAD]);
        assert_eq!(b.pool_weights().data(), &[0.5, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn identical_embeddings_give_log_of_candidates() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::full(&[6, 4], 0.7));
        let l = nt_xent(&mut g, z, 0.1).unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);
    }
}
