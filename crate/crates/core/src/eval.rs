//! Per-path fine-tuning, task metrics and z-score ranking.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, Graph, NodeId, ParamStore, Schedule, Tensor};
use crate::blocks::{self, apply_bn_updates, ForwardCtx};
use crate::data::{Alphabet, LabeledDataset, MetricKind, Problem, TaskSpec};
use crate::error::{Error, Result};
use crate::space::Path;
use crate::supernet::{
    assemble, build_registry, masked_mean_pool, pretrain, step_rng, BlockRegistry, Model, PretrainConfig, PretrainState,
    SupernetConfig, TokenBatch,
};
use crate::tokenize::Tokenizer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Protocol {
    OnlyFt,
    MaskFt,
    ConFt,
    NtpFt,
    Foundation,
}

impl Protocol {
    pub const SEARCH: [Protocol; 4] = [Protocol::OnlyFt, Protocol::MaskFt, Protocol::ConFt, Protocol::NtpFt];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::OnlyFt => "ONLY_FT",
            Protocol::MaskFt => "MASK_FT",
            Protocol::ConFt => "CON_FT",
            Protocol::NtpFt => "NTP_FT",
            Protocol::Foundation => "FOUNDATION",
        }
    }

    /// Name of the pretraining objective whose weights this protocol inherits.
    pub fn objective_name(self) -> Option<&'static str> {
        match self {
            Protocol::OnlyFt | Protocol::Foundation => None,
            Protocol::MaskFt => Some("mm"),
            Protocol::ConFt => Some("cl"),
            Protocol::NtpFt => Some("ntp"),
        }
    }

    pub fn inherits(self) -> bool {
        self != Protocol::OnlyFt
    }

    /// Fine-tune with causal blocks, matching how the weights were pretrained.
    pub fn causal(self) -> bool {
        self == Protocol::NtpFt
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.to_ascii_uppercase().replace('-', "_");
        [Protocol::OnlyFt, Protocol::MaskFt, Protocol::ConFt, Protocol::NtpFt, Protocol::Foundation]
            .into_iter()
            .find(|p| p.name() == up)
            .ok_or_else(|| Error::Config(format!("unknown protocol {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfRecord {
    pub path_id: String,
    pub task_id: u32,
    pub protocol: Protocol,
    pub tokenizer_id: String,
    pub metric_value: f64,
    pub seed: u64,
}

impl PerfRecord {
    pub fn key(&self) -> (String, u32, Protocol, String, u64) {
        (self.path_id.clone(), self.task_id, self.protocol, self.tokenizer_id.clone(), self.seed)
    }
}

// ---- metrics -------------------------------------------------------------------

fn check_pair(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.len() < 2 {
        return Err(Error::Config(format!("need at least 2 predictions, got {}", preds.len())));
    }
    Ok(())
}

pub fn accuracy(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds, labels)?;
    Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64)
}

/// Matthews correlation over integer class labels (multiclass generalisation);
/// 0 when the covariance is degenerate.
pub fn mcc(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds, labels)?;
    let classes: BTreeSet<i64> = preds.iter().chain(labels).map(|&v| v as i64).collect();
    let idx: BTreeMap<i64, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let k = classes.len();
    let mut cm = vec![vec![0f64; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        cm[idx[&(l as i64)]][idx[&(p as i64)]] += 1.0;
    }
    let n = preds.len() as f64;
    let correct: f64 = (0..k).map(|i| cm[i][i]).sum();
    let t: Vec<f64> = (0..k).map(|i| cm[i].iter().sum()).collect();
    let p: Vec<f64> = (0..k).map(|j| (0..k).map(|i| cm[i][j]).sum()).collect();
    let tp: f64 = t.iter().zip(&p).map(|(a, b)| a * b).sum();
    let cov = correct * n - tp;
    let denom = ((n * n - p.iter().map(|v| v * v).sum::<f64>()) * (n * n - t.iter().map(|v| v * v).sum::<f64>())).sqrt();
    Ok(if denom == 0.0 { 0.0 } else { cov / denom })
}

pub fn rmse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds, labels)?;
    Ok((preds.iter().zip(labels).map(|(p, l)| (p - l).powi(2)).sum::<f64>() / preds.len() as f64).sqrt())
}

/// 1-based ranks with ties given their average rank.
pub fn tied_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Spearman correlation with tied ranks; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    Ok(pearson(&tied_ranks(x), &tied_ranks(y)))
}

pub fn metric(preds: &[f64], labels: &[f64], kind: MetricKind) -> Result<f64> {
    match kind {
        MetricKind::Accuracy => accuracy(preds, labels),
        MetricKind::Mcc => mcc(preds, labels),
        MetricKind::Rmse => rmse(preds, labels),
        MetricKind::Spearman => spearman(preds, labels),
    }
}

/// Spearman correlation between two scorings of the same ids.
pub fn spearman_rho(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Result<f64> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::MismatchedIds);
    }
    let x: Vec<f64> = a.values().copied().collect();
    let y: Vec<f64> = b.values().copied().collect();
    spearman(&x, &y)
}

/// Converts an ordering (best first) into scores usable by [`spearman_rho`].
pub fn order_scores(order: &[String]) -> BTreeMap<String, f64> {
    order.iter().enumerate().map(|(i, id)| (id.clone(), -(i as f64))).collect()
}

// ---- ranking -------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub task_id: u32,
    pub mean: f64,
    pub std: f64,
    pub direction: i8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub tasks: Vec<TaskStats>,
    pub scores: BTreeMap<String, f64>,
    /// Descending score, ties by path id.
    pub order: Vec<String>,
}

/// Averages duplicate records of one (path, task) pair, e.g. across seeds.
pub fn perf_matrix(records: &[PerfRecord]) -> BTreeMap<(String, u32), f64> {
    let mut acc: BTreeMap<(String, u32), (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry((r.path_id.clone(), r.task_id)).or_default();
        e.0 += r.metric_value;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Score(a) = mean over tasks of s_t (P_t(a) - mu_t) / sigma_t, with
/// population sigma; a task with sigma 0 contributes 0.
pub fn zscore_rank(records: &[PerfRecord], tasks: &[TaskSpec]) -> Result<RankTable> {
    if tasks.is_empty() {
        return Err(Error::Config("no tasks to rank over".into()));
    }
    let perf = perf_matrix(records);
    let task_ids: BTreeSet<u32> = tasks.iter().map(|t| t.task_id).collect();
    let archs: BTreeSet<String> = perf.keys().filter(|(_, t)| task_ids.contains(t)).map(|(a, _)| a.clone()).collect();
    if archs.len() < 2 {
        return Err(Error::TooFew { k: 2, available: archs.len() });
    }
    let mut missing = Vec::new();
    for a in &archs {
        for t in tasks {
            if !perf.contains_key(&(a.clone(), t.task_id)) {
                missing.push((a.clone(), t.task_id));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingPairs(missing));
    }
    let n = archs.len() as f64;
    let mut stats = Vec::with_capacity(tasks.len());
    let mut scores: BTreeMap<String, f64> = archs.iter().map(|a| (a.clone(), 0.0)).collect();
    for t in tasks {
        let vals: Vec<f64> = archs.iter().map(|a| perf[&(a.clone(), t.task_id)]).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let s = f64::from(t.direction);
        if std > 0.0 {
            for (a, v) in archs.iter().zip(&vals) {
                *scores.get_mut(a).expect("arch") += s * ((v - mean) / std);
            }
        }
        stats.push(TaskStats { task_id: t.task_id, mean, std, direction: t.direction });
    }
    let k = tasks.len() as f64;
    for v in scores.values_mut() {
        *v /= k;
    }
    let mut order: Vec<String> = archs.into_iter().collect();
    order.sort_by(|a, b| scores[b].total_cmp(&scores[a]).then_with(|| a.cmp(b)));
    Ok(RankTable { tasks: stats, scores, order })
}

pub fn select_top_k(table: &RankTable, k: usize) -> Result<Vec<String>> {
    if k > table.order.len() {
        return Err(Error::TooFew { k, available: table.order.len() });
    }
    Ok(table.order[..k].to_vec())
}

// ---- fine-tuning ------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 32, epochs: 5, warmup_steps: 50, weight_decay: 0.01, seed: 0 }
    }
}

impl FinetuneConfig {
    /// Learning rates used for full-size models: 3e-5 for DNA, 5e-5 for protein.
    pub fn reference(alphabet: Alphabet) -> Self {
        let lr = match alphabet {
            Alphabet::Dna => 3e-5,
            Alphabet::Protein => 5e-5,
        };
        Self { lr, epochs: 3, ..Self::default() }
    }
}

/// Where the path's initial weights come from.
#[derive(Clone, Copy, Debug)]
pub enum WeightSource<'a> {
    Scratch(&'a SupernetConfig),
    Inherit(&'a BlockRegistry),
}

/// The path's blocks and embeddings, freshly initialised or copied from a supernet.
pub fn initial_params(path: &Path, protocol: Protocol, source: WeightSource, seed: u64) -> Result<(SupernetConfig, ParamStore)> {
    match (protocol.inherits(), source) {
        (false, WeightSource::Scratch(cfg)) => Ok((*cfg, build_registry(std::slice::from_ref(path), *cfg, seed)?.params)),
        (false, WeightSource::Inherit(reg)) => {
            Ok((reg.config, build_registry(std::slice::from_ref(path), reg.config, seed)?.params))
        }
        (true, WeightSource::Scratch(_)) => {
            Err(Error::MissingCheckpoint(format!("{protocol} needs pretrained weights for {}", path.path_id)))
        }
        (true, WeightSource::Inherit(reg)) => {
            let mut out = ParamStore::new();
            let mut prefixes: Vec<String> = path.layers(reg.config.h0).iter().map(|k| format!("{k}.")).collect();
            prefixes.push("embed.".into());
            for k in path.layers(reg.config.h0) {
                reg.block(&k)?;
            }
            for pre in &prefixes {
                for (n, t) in reg.params.with_prefix(pre) {
                    out.insert(n.clone(), t.clone());
                }
            }
            Ok((reg.config, out))
        }
    }
}

fn encode_all(tokenizer: &Tokenizer, data: &LabeledDataset) -> Result<Vec<Vec<usize>>> {
    data.items.iter().map(|(s, _)| tokenizer.encode(s)).collect()
}

struct Head {
    model: Model,
    config: SupernetConfig,
    problem: Problem,
    causal: bool,
}

impl Head {
    fn forward(&self, g: &mut Graph, p: &ParamStore, batch: &TokenBatch, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let x = self.model.features(g, p, batch, ctx)?;
        let pooled = masked_mean_pool(g, x, batch)?;
        blocks::linear(g, p, "task_head", pooled)
    }

    fn loss(&self, g: &mut Graph, out: NodeId, labels: &[f64]) -> Result<NodeId> {
        match self.problem {
            Problem::Regression => {
                let y = g.constant(Tensor::new(vec![labels.len(), 1], labels.to_vec())?);
                g.mse(out, y)
            }
            _ => {
                let t: Vec<Option<usize>> = labels.iter().map(|&l| Some(l as usize)).collect();
                g.cross_entropy(out, &t)
            }
        }
    }

    fn predict(&self, p: &ParamStore, rows: &[Vec<usize>], idx: &[usize], batch_size: usize) -> Result<Vec<f64>> {
        let chunks: Vec<&[usize]> = idx.chunks(batch_size.max(1)).collect();
        let parts: Vec<Result<Vec<f64>>> = chunks
            .par_iter()
            .map(|chunk| {
                let seqs: Vec<Vec<usize>> = chunk.iter().map(|&i| rows[i].clone()).collect();
                let batch = TokenBatch::new(&seqs, self.config.max_len)?;
                let mut g = Graph::new();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut ctx = ForwardCtx::new(false, self.causal, &mut rng);
                let out = self.forward(&mut g, p, &batch, &mut ctx)?;
                let v = g.value(out);
                Ok((0..chunk.len())
                    .map(|r| match self.problem {
                        Problem::Regression => v.row(r)[0],
                        _ => argmax(v.row(r)) as f64,
                    })
                    .collect())
            })
            .collect();
        let mut out = Vec::with_capacity(idx.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn better(kind: MetricKind, a: f64, b: f64) -> bool {
    if kind.direction() > 0 {
        a > b
    } else {
        a < b
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub record: PerfRecord,
    pub best_epoch: usize,
    pub valid_metric: f64,
    pub train_losses: Vec<f64>,
}

/// Trains the path plus a mean-pool linear head on the task's train split,
/// keeps the weights of the best validation epoch and scores them on test.
pub fn finetune(
    path: &Path,
    protocol: Protocol,
    source: WeightSource,
    task: &TaskSpec,
    data: &LabeledDataset,
    tokenizer: &Tokenizer,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    data.check_labels(task.problem)?;
    if data.split.train.is_empty() || data.split.valid.len() < 2 || data.split.test.len() < 2 {
        return Err(Error::Config(format!("task {} needs non-empty train and at least 2 valid/test items", task.task_id)));
    }
    let (config, mut params) = initial_params(path, protocol, source, cfg.seed)?;
    if config.vocab_size != tokenizer.vocab_size() {
        return Err(Error::Config(format!("tokenizer has {} ids, model expects {}", tokenizer.vocab_size(), config.vocab_size)));
    }
    let mut head_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4ead);
    blocks::linear_params(&mut params, &mut head_rng, "task_head", path.output_dim(), task.problem.outputs());
    let rows = encode_all(tokenizer, data)?;
    let labels: Vec<f64> = data.items.iter().map(|(_, y)| *y).collect();
    let model = assemble(&BlockRegistry::skeleton(std::slice::from_ref(path), config)?, path)?;
    let head = Head { model, config, problem: task.problem, causal: protocol.causal() };

    let per_epoch = data.split.train.len().div_ceil(cfg.batch_size.max(1));
    let schedule = Schedule { warmup_steps: cfg.warmup_steps.min(per_epoch * cfg.epochs / 2), total_steps: Some(per_epoch * cfg.epochs) };
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, schedule, ..Default::default() });
    let valid_labels: Vec<f64> = data.split.valid.iter().map(|&i| labels[i]).collect();

    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut train_losses = Vec::new();
    for epoch in 0..cfg.epochs.max(1) {
        let mut order = data.split.train.clone();
        let mut rng = step_rng(cfg.seed, epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|&i| rows[i].clone()).collect();
            let ys: Vec<f64> = chunk.iter().map(|&i| labels[i]).collect();
            let batch = TokenBatch::new(&seqs, config.max_len)?;
            let mut g = Graph::new();
            let mut ctx = ForwardCtx::new(true, head.causal, &mut rng);
            let out = head.forward(&mut g, &params, &batch, &mut ctx)?;
            let updates = std::mem::take(&mut ctx.bn_updates);
            let loss = head.loss(&mut g, out, &ys)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                train_losses.push(value);
                return Err(Error::Divergence { step: opt.steps_taken(), trace: train_losses });
            }
            let grads = g.backward(loss)?.by_param();
            opt.step(&mut params, &grads)?;
            apply_bn_updates(&g, &mut params, &updates)?;
            sum += value;
        }
        train_losses.push(sum / per_epoch as f64);
        let preds = head.predict(&params, &rows, &data.split.valid, cfg.batch_size)?;
        let score = metric(&preds, &valid_labels, task.metric)?;
        if best.as_ref().is_none_or(|(b, _, _)| better(task.metric, score, *b)) {
            best = Some((score, epoch, params.clone()));
        }
    }
    let (valid_metric, best_epoch, best_params) = best.expect("at least one epoch");
    let preds = head.predict(&best_params, &rows, &data.split.test, cfg.batch_size)?;
    let test_labels: Vec<f64> = data.split.test.iter().map(|&i| labels[i]).collect();
    let value = metric(&preds, &test_labels, task.metric)?;
    let record = PerfRecord {
        path_id: path.path_id.clone(),
        task_id: task.task_id,
        protocol,
        tokenizer_id: tokenizer.id(),
        metric_value: value,
        seed: cfg.seed,
    };
    Ok(FinetuneOutcome { record, best_epoch, valid_metric, train_losses })
}

/// Fresh weights for one path, pretrained on `corpus`, then fine-tuned on
/// each task from the same starting point.
pub fn foundation_flow(
    path: &Path,
    config: &SupernetConfig,
    corpus: &[Vec<usize>],
    pretrain_cfg: &PretrainConfig,
    tasks: &[(TaskSpec, LabeledDataset)],
    tokenizer: &Tokenizer,
    cfg: &FinetuneConfig,
) -> Result<Vec<PerfRecord>> {
    let paths = std::slice::from_ref(path);
    let mut reg = build_registry(paths, *config, pretrain_cfg.seed)?;
    let mut state = PretrainState::new(pretrain_cfg.optimizer);
    pretrain(&mut reg, paths, corpus, pretrain_cfg, &mut state)?;
    tasks
        .iter()
        .map(|(spec, data)| {
            finetune(path, Protocol::Foundation, WeightSource::Inherit(&reg), spec, data, tokenizer, cfg).map(|o| o.record)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tied_ranks_average() {
        assert_eq!(tied_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in [Protocol::OnlyFt, Protocol::MaskFt, Protocol::ConFt, Protocol::NtpFt, Protocol::Foundation] {
            assert_eq!(p.name().parse::<Protocol>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{}\"", p.name()));
        }
    }
}
