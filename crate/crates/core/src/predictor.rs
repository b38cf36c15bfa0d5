//! Architecture encoding and a message-passing performance surrogate.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path as FsPath;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_checkpoint, save_checkpoint, AdamW, AdamWConfig, Graph, NodeId, ParamStore, Tensor};
use crate::blocks::{self, BlockKind};
use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::eval::{perf_matrix, PerfRecord};
use crate::space::{Path, SpaceConfig};
use crate::supernet::step_rng;

pub const TASK_EMBED_DIM: usize = 128;

/// Feature width per node: one-hot kind plus normalised in/out widths.
pub const NODE_FEATURES: usize = BlockKind::ALL.len() + 2;

/// Min-max range used to normalise widths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimBounds {
    pub min: usize,
    pub max: usize,
}

impl DimBounds {
    pub fn new(min: usize, max: usize) -> Result<Self> {
        if max <= min {
            return Err(Error::Config(format!("width bounds ({min}, {max}) are degenerate")));
        }
        Ok(Self { min, max })
    }

    /// Smallest width including `h0`, largest configured width.
    pub fn from_space(cfg: &SpaceConfig) -> Result<Self> {
        let min = cfg.widths.iter().copied().chain([cfg.h0]).min().expect("h0");
        let max = cfg.widths.iter().copied().chain([cfg.h0]).max().expect("h0");
        Self::new(min, max)
    }

    pub fn normalize(&self, h: usize) -> f64 {
        (h as f64 - self.min as f64) / (self.max - self.min) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchEncoding {
    pub adjacency: Vec<Vec<u8>>,
    pub features: Vec<Vec<f64>>,
}

impl ArchEncoding {
    pub fn nodes(&self) -> usize {
        self.features.len()
    }
}

pub fn encode_arch(path: &Path, h0: usize, bounds: DimBounds) -> Result<ArchEncoding> {
    DimBounds::new(bounds.min, bounds.max)?;
    let n = path.depth;
    let mut adjacency = vec![vec![0u8; n]; n];
    for (i, row) in adjacency.iter_mut().enumerate().take(n.saturating_sub(1)) {
        row[i + 1] = 1;
    }
    let features = path
        .layers(h0)
        .iter()
        .map(|k| {
            let mut row = vec![0.0; NODE_FEATURES];
            row[k.kind.index()] = 1.0;
            row[BlockKind::ALL.len()] = bounds.normalize(k.dim_in);
            row[BlockKind::ALL.len() + 1] = bounds.normalize(k.dim_out);
            row
        })
        .collect();
    Ok(ArchEncoding { adjacency, features })
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Bucket index a word hashes to.
pub fn word_bucket(word: &str) -> usize {
    (fnv1a(&word.to_lowercase()) % TASK_EMBED_DIM as u64) as usize
}

/// Hashed bag of lowercase words, L2-normalised.
pub fn embed_text(text: &str) -> Result<Vec<f64>> {
    let mut v = vec![0.0; TASK_EMBED_DIM];
    let mut any = false;
    for w in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        v[word_bucket(w)] += 1.0;
        any = true;
    }
    if !any {
        return Err(Error::Config("cannot embed an empty description".into()));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

pub fn embed_task(spec: &TaskSpec) -> Result<Vec<f64>> {
    embed_text(&spec.description)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// One training example: a direction-aligned, per-task z-scored metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub path_id: String,
    pub task_id: u32,
    pub target: f64,
}

/// Per-task z-scores of the records (population sigma, zero when constant),
/// multiplied by the task direction so larger is always better.
pub fn zscore_samples(records: &[PerfRecord], tasks: &[TaskSpec]) -> Vec<Sample> {
    let perf = perf_matrix(records);
    let mut out = Vec::new();
    for t in tasks {
        let rows: Vec<(&String, f64)> = perf.iter().filter(|((_, tid), _)| *tid == t.task_id).map(|((a, _), v)| (a, *v)).collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        let mean = rows.iter().map(|r| r.1).sum::<f64>() / n;
        let std = (rows.iter().map(|r| (r.1 - mean).powi(2)).sum::<f64>() / n).sqrt();
        let s = f64::from(t.direction);
        for (a, v) in rows {
            let z = if std > 0.0 { s * ((v - mean) / std) } else { 0.0 };
            out.push(Sample { path_id: a.clone(), task_id: t.task_id, target: z });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub hidden: usize,
    pub rounds: usize,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { hidden: 64, rounds: 2, dropout: 0.3, lr: 1e-3, weight_decay: 1e-5, batch_size: 32, epochs: 50, seed: 0 }
    }
}

/// Message-passing surrogate over path graphs, conditioned on a task embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    pub config: PredictorConfig,
    pub params: ParamStore,
}

/// Batched graph inputs padded to the deepest path.
struct GraphBatch {
    x: Tensor,
    msg: Tensor,
    readout: Tensor,
    task: Tensor,
}

impl GraphBatch {
    fn new(items: &[(&ArchEncoding, &[f64])]) -> Self {
        let b = items.len();
        let n = items.iter().map(|(e, _)| e.nodes()).max().unwrap_or(1);
        let mut x = vec![0.0; b * n * NODE_FEATURES];
        let mut msg = vec![0.0; b * n * n];
        let mut readout = vec![0.0; b * n];
        let mut task = Vec::with_capacity(b * TASK_EMBED_DIM);
        for (bi, (enc, emb)) in items.iter().enumerate() {
            let k = enc.nodes();
            for (i, row) in enc.features.iter().enumerate() {
                x[(bi * n + i) * NODE_FEATURES..(bi * n + i + 1) * NODE_FEATURES].copy_from_slice(row);
                readout[bi * n + i] = 1.0 / k as f64;
            }
            // Row j of the message matrix averages over the predecessors of node j.
            for j in 0..k {
                let preds: Vec<usize> = (0..k).filter(|&i| enc.adjacency[i][j] == 1).collect();
                for &i in &preds {
                    msg[bi * n * n + j * n + i] = 1.0 / preds.len() as f64;
                }
            }
            task.extend_from_slice(emb);
        }
        Self {
            x: Tensor::new(vec![b, n, NODE_FEATURES], x).expect("sized"),
            msg: Tensor::new(vec![b, n, n], msg).expect("sized"),
            readout: Tensor::new(vec![b, 1, n], readout).expect("sized"),
            task: Tensor::new(vec![b, TASK_EMBED_DIM], task).expect("sized"),
        }
    }
}

impl Predictor {
    pub fn new(config: PredictorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let h = config.hidden;
        blocks::linear_params(&mut params, &mut rng, "gnn.in", NODE_FEATURES, h);
        for r in 0..config.rounds {
            blocks::linear_params(&mut params, &mut rng, &format!("gnn.self{r}"), h, h);
            blocks::linear_params(&mut params, &mut rng, &format!("gnn.msg{r}"), h, h);
        }
        blocks::linear_params(&mut params, &mut rng, "mlp.0", h + TASK_EMBED_DIM, h);
        blocks::linear_params(&mut params, &mut rng, "mlp.1", h, 1);
        Self { config, params }
    }

    fn forward(&self, g: &mut Graph, batch: &GraphBatch, dropout: Option<&mut ChaCha8Rng>) -> Result<NodeId> {
        let p = &self.params;
        let x = g.constant(batch.x.clone());
        let msg = g.constant(batch.msg.clone());
        let x = blocks::linear(g, p, "gnn.in", x)?;
        let mut h = g.relu(x);
        for r in 0..self.config.rounds {
            let own = blocks::linear(g, p, &format!("gnn.self{r}"), h)?;
            let agg = g.matmul(msg, h)?;
            let w = p.bind(g, &format!("gnn.msg{r}.w"))?;
            let incoming = g.matmul(agg, w)?;
            let sum = g.add(own, incoming)?;
            h = g.relu(sum);
        }
        let readout = g.constant(batch.readout.clone());
        let pooled = g.matmul(readout, h)?;
        let b = batch.task.shape()[0];
        let pooled = g.reshape(pooled, &[b, self.config.hidden])?;
        let task = g.constant(batch.task.clone());
        let joint = g.concat(&[pooled, task], 1)?;
        let z = blocks::linear(g, p, "mlp.0", joint)?;
        let mut z = g.relu(z);
        if let Some(rng) = dropout {
            z = g.dropout(z, self.config.dropout, rng)?;
        }
        let out = blocks::linear(g, p, "mlp.1", z)?;
        g.reshape(out, &[b])
    }

    /// Trains on `samples`; returns the predictor and mean loss per epoch.
    pub fn train(
        samples: &[Sample],
        encodings: &BTreeMap<String, ArchEncoding>,
        embeddings: &BTreeMap<u32, Vec<f64>>,
        config: PredictorConfig,
    ) -> Result<(Self, Vec<f64>)> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let resolve = |s: &Sample| -> Result<(&ArchEncoding, &[f64])> {
            let e = encodings.get(&s.path_id).ok_or_else(|| Error::Config(format!("no encoding for {}", s.path_id)))?;
            let t = embeddings.get(&s.task_id).ok_or_else(|| Error::Config(format!("no embedding for task {}", s.task_id)))?;
            Ok((e, t.as_slice()))
        };
        for s in samples {
            resolve(s)?;
        }
        let mut model = Self::new(config);
        let mut opt = AdamW::new(AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            coupled_decay: true,
            ..Default::default()
        });
        let mut losses = Vec::with_capacity(config.epochs);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for epoch in 0..config.epochs {
            let mut rng = step_rng(config.seed, epoch);
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(config.batch_size.max(1)) {
                let items: Vec<(&ArchEncoding, &[f64])> = chunk.iter().map(|&i| resolve(&samples[i])).collect::<Result<_>>()?;
                let batch = GraphBatch::new(&items);
                let mut g = Graph::new();
                let pred = model.forward(&mut g, &batch, Some(&mut rng))?;
                let y = g.constant(Tensor::new(vec![chunk.len()], chunk.iter().map(|&i| samples[i].target).collect())?);
                let loss = g.mse(pred, y)?;
                total += g.value(loss).item() * chunk.len() as f64;
                let grads = g.backward(loss)?.by_param();
                opt.step(&mut model.params, &grads)?;
            }
            losses.push(total / samples.len() as f64);
        }
        Ok((model, losses))
    }

    /// Predicted score per encoding for one task embedding.
    pub fn predict(&self, encodings: &[&ArchEncoding], task: &[f64]) -> Result<Vec<f64>> {
        let chunks: Vec<&[&ArchEncoding]> = encodings.chunks(256).collect();
        let parts: Vec<Result<Vec<f64>>> = chunks
            .par_iter()
            .map(|chunk| {
                let items: Vec<(&ArchEncoding, &[f64])> = chunk.iter().map(|e| (*e, task)).collect();
                let mut g = Graph::new();
                let out = self.forward(&mut g, &GraphBatch::new(&items), None)?;
                Ok(g.value(out).data().to_vec())
            })
            .collect();
        let mut out = Vec::with_capacity(encodings.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn save(&self, stem: &FsPath) -> Result<()> {
        save_checkpoint(&self.params, stem)?;
        let file = stem.with_extension("config.json");
        fs::write(&file, serde_json::to_vec_pretty(&self.config)?).map_err(|e| Error::io(&file, e))
    }

    pub fn load(stem: &FsPath) -> Result<Self> {
        let file = stem.with_extension("config.json");
        if !file.exists() {
            return Err(Error::MissingCheckpoint(file.display().to_string()));
        }
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        Ok(Self { config: serde_json::from_str(&text)?, params: load_checkpoint(stem)? })
    }
}

/// Orders `scores` (id, value) descending with id tie-break and keeps `k`.
pub fn top_k_by_score(mut scores: Vec<(String, f64)>, k: usize) -> Result<Vec<String>> {
    if k > scores.len() {
        return Err(Error::TooFew { k, available: scores.len() });
    }
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(scores.into_iter().take(k).map(|s| s.0).collect())
}

pub fn predict_topk(
    predictor: &Predictor,
    candidates: &[Path],
    encodings: &BTreeMap<String, ArchEncoding>,
    task: &[f64],
    k: usize,
) -> Result<Vec<String>> {
    let encs: Vec<&ArchEncoding> = candidates
        .iter()
        .map(|p| encodings.get(&p.path_id).ok_or_else(|| Error::Config(format!("no encoding for {}", p.path_id))))
        .collect::<Result<_>>()?;
    let preds = predictor.predict(&encs, task)?;
    top_k_by_score(candidates.iter().map(|p| p.path_id.clone()).zip(preds).collect(), k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub hit_rate: f64,
}

pub fn prediction_metrics(pred: &[String], truth: &BTreeSet<String>, k: usize) -> Result<PredictionMetrics> {
    if truth.is_empty() {
        return Err(Error::Config("ground-truth set is empty".into()));
    }
    if k == 0 || k > pred.len() {
        return Err(Error::TooFew { k, available: pred.len() });
    }
    let top: BTreeSet<&String> = pred[..k].iter().collect();
    let hits = top.iter().filter(|p| truth.contains(**p)).count() as f64;
    Ok(PredictionMetrics { precision: hits / k as f64, recall: hits / truth.len() as f64, hit_rate: f64::from(u8::from(hits >= 1.0)) })
}

/// Top `fraction` of evaluated architectures for one task (at least one),
/// best first by direction-aligned metric, ties by id.
pub fn ground_truth(records: &[PerfRecord], task: &TaskSpec, fraction: f64) -> Result<BTreeSet<String>> {
    let perf = perf_matrix(records);
    let s = f64::from(task.direction);
    let scores: Vec<(String, f64)> = perf.iter().filter(|((_, t), _)| *t == task.task_id).map(|((a, _), v)| (a.clone(), s * v)).collect();
    if scores.is_empty() {
        return Err(Error::Config(format!("no records for task {}", task.task_id)));
    }
    let k = ((scores.len() as f64 * fraction).ceil() as usize).clamp(1, scores.len());
    Ok(top_k_by_score(scores, k)?.into_iter().collect())
}

/// Train/test task ids for predictor evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

impl TaskSplit {
    /// Similar tasks appear on both sides.
    pub fn supervised() -> Self {
        Self { train: vec![0, 1, 4, 5, 7, 8, 9, 11, 12, 13, 14, 16], test: vec![2, 3, 6, 10, 15, 17] }
    }

    /// Test tasks have no close relative in training.
    pub fn transfer() -> Self {
        Self { train: vec![5, 6, 7, 8, 9, 10, 12, 13, 14], test: vec![2, 11, 16, 17] }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "supervised" => Ok(Self::supervised()),
            "transfer" => Ok(Self::transfer()),
            other => Err(Error::Config(format!("unknown split preset {other:?}"))),
        }
    }
}

/// Metrics averaged over the test tasks at each `k`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_predictor(
    predictor: &Predictor,
    paths: &[Path],
    encodings: &BTreeMap<String, ArchEncoding>,
    records: &[PerfRecord],
    tasks: &[TaskSpec],
    test: &[u32],
    ks: &[usize],
    truth_fraction: f64,
) -> Result<BTreeMap<usize, PredictionMetrics>> {
    let evaluated: BTreeSet<&String> = records.iter().map(|r| &r.path_id).collect();
    let candidates: Vec<Path> = paths.iter().filter(|p| evaluated.contains(&p.path_id)).cloned().collect();
    let mut sums: BTreeMap<usize, PredictionMetrics> = BTreeMap::new();
    let mut n = 0usize;
    for t in tasks.iter().filter(|t| test.contains(&t.task_id)) {
        let truth = ground_truth(records, t, truth_fraction)?;
        let emb = embed_task(t)?;
        let kmax = ks.iter().copied().max().unwrap_or(1).min(candidates.len());
        let pred = predict_topk(predictor, &candidates, encodings, &emb, kmax)?;
        for &k in ks {
            let m = prediction_metrics(&pred, &truth, k.min(kmax))?;
            let e = sums.entry(k).or_insert(PredictionMetrics { precision: 0.0, recall: 0.0, hit_rate: 0.0 });
            e.precision += m.precision;
            e.recall += m.recall;
            e.hit_rate += m.hit_rate;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("no test tasks with records".into()));
    }
    for m in sums.values_mut() {
        m.precision /= n as f64;
        m.recall /= n as f64;
        m.hit_rate /= n as f64;
    }
    Ok(sums)
}
