//! Config-driven experiment runs: space, pretraining, fine-tune grid, reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path as FsPath, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{AdamWConfig, Schedule};
use crate::blocks::BlockSpec;
use crate::data::{gen_gc_task, gen_motif_task, load_plain_seeded, LabeledDataset, Sequence, TaskSpec};
use crate::error::{Error, Result};
use crate::eval::{finetune, foundation_flow, spearman_rho, zscore_rank, FinetuneConfig, PerfRecord, Protocol, WeightSource};
use crate::space::{compose_space, save_manifest, Path, SpaceConfig};
use crate::supernet::{build_registry, load_pretrain, pretrain, save_pretrain, BlockRegistry, PretrainConfig, PretrainState, SslObjective, SupernetConfig};
use crate::tokenize::{Tokenizer, TokenizerSpec};

/// Where a task's data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskSource {
    Motif {
        id: u32,
        motif: String,
        n: usize,
        len: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Gc {
        id: u32,
        n: usize,
        len: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Task manifest (JSON) plus a plain `sequence label` file.
    File {
        manifest: PathBuf,
        data: PathBuf,
        #[serde(default)]
        split_seed: u64,
    },
}

impl TaskSource {
    fn load(&self, base: &FsPath) -> Result<(TaskSpec, LabeledDataset)> {
        match self {
            TaskSource::Motif { id, motif, n, len, noise, seed } => {
                let (mut spec, data) = gen_motif_task(*seed, *n, *len, motif, *noise)?;
                spec.task_id = *id;
                Ok((spec, data))
            }
            TaskSource::Gc { id, n, len, seed } => {
                let (mut spec, data) = gen_gc_task(*seed, *n, *len)?;
                spec.task_id = *id;
                Ok((spec, data))
            }
            TaskSource::File { manifest, data, split_seed } => {
                let spec = TaskSpec::load(&base.join(manifest))?;
                let ds = load_plain_seeded(&base.join(data), spec.modality, *split_seed)?;
                Ok((spec, ds))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self { steps: 200, batch_size: 16, lr: 3e-3, weight_decay: 0.01, warmup_steps: 20, seed: 0 }
    }
}

impl PretrainSettings {
    pub fn config(&self, objective: SslObjective) -> PretrainConfig {
        let optimizer = AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            schedule: Schedule { warmup_steps: self.warmup_steps.min(self.steps / 2), total_steps: Some(self.steps) },
            max_grad_norm: Some(1.0),
            ..AdamWConfig::default()
        };
        PretrainConfig { objective, steps: self.steps, batch_size: self.batch_size, seed: self.seed, optimizer }
    }
}

/// One experiment, usually read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub space: SpaceConfig,
    /// Explicit path subset; empty keeps every composed path.
    #[serde(default)]
    pub path_ids: Vec<String>,
    /// Evenly spaced subset of the composed paths.
    #[serde(default)]
    pub max_paths: Option<usize>,
    pub tokenizer: TokenizerSpec,
    pub protocols: Vec<Protocol>,
    /// Fine-tune seeds; every job runs once per seed.
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskSource>,
    #[serde(default)]
    pub pretrain: PretrainSettings,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    /// Relative task files resolve against this directory.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(file: &FsPath) -> Result<Self> {
        let text = fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = file.parent().map(FsPath::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        if self.protocols.is_empty() || self.seeds.is_empty() || self.tasks.is_empty() {
            return Err(Error::Config("protocols, seeds and tasks must be non-empty".into()));
        }
        // Catch bad block options here rather than halfway through a run.
        for &kind in &self.space.modules {
            for &w in &self.space.widths {
                BlockSpec::new(kind, w, w).with_options(self.space.block_options).validate()?;
            }
        }
        let mut ids = BTreeSet::new();
        for t in &self.tasks {
            match t {
                TaskSource::Motif { id, .. } | TaskSource::Gc { id, .. } => {
                    if !ids.insert(*id) {
                        return Err(Error::Config(format!("duplicate task id {id}")));
                    }
                }
                TaskSource::File { manifest, data, .. } => {
                    for f in [manifest, data] {
                        let p = self.base_dir.join(f);
                        if !p.exists() {
                            return Err(Error::Config(format!("task file {} does not exist", p.display())));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

/// Content hash identifying a record's (path, task, protocol, tokenizer, seed).
pub fn record_key(r: &PerfRecord) -> String {
    let key = serde_json::to_vec(&r.key()).expect("plain tuple serialises");
    hex::encode(&Sha256::digest(key)[..16])
}

#[derive(Serialize, Deserialize)]
struct StoredRecord {
    key: String,
    #[serde(flatten)]
    record: PerfRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config_hash: String,
    pub created_unix: u64,
}

pub const RESULTS_FILE: &str = "results.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TASKS_FILE: &str = "tasks.json";
pub const PATHS_FILE: &str = "paths.json";

/// Append-only JSONL of records, one line per distinct key.
#[derive(Debug)]
pub struct ResultsStore {
    dir: PathBuf,
    records: Vec<PerfRecord>,
    keys: BTreeSet<String>,
}

impl ResultsStore {
    pub fn open(dir: &FsPath) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut store = Self { dir: dir.to_path_buf(), records: Vec::new(), keys: BTreeSet::new() };
        let file = dir.join(RESULTS_FILE);
        if file.exists() {
            let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let s: StoredRecord = serde_json::from_str(line)?;
                if record_key(&s.record) != s.key {
                    return Err(Error::MalformedLine { line: i + 1, reason: "stored key does not match record".into() });
                }
                if store.keys.insert(s.key) {
                    store.records.push(s.record);
                }
            }
        }
        Ok(store)
    }

    pub fn dir(&self) -> &FsPath {
        &self.dir
    }

    pub fn records(&self) -> &[PerfRecord] {
        &self.records
    }

    pub fn contains(&self, key: &str) -> bool {
        self.keys.contains(key)
    }

    /// Appends records with unseen keys; returns how many were written.
    pub fn append(&mut self, records: &[PerfRecord]) -> Result<usize> {
        let file = self.dir.join(RESULTS_FILE);
        let mut out = String::new();
        let mut added = 0;
        for r in records {
            let key = record_key(r);
            if self.keys.insert(key.clone()) {
                out.push_str(&serde_json::to_string(&StoredRecord { key, record: r.clone() })?);
                out.push('\n');
                self.records.push(r.clone());
                added += 1;
            }
        }
        if added > 0 {
            let mut f = OpenOptions::new().create(true).append(true).open(&file).map_err(|e| Error::io(&file, e))?;
            f.write_all(out.as_bytes()).map_err(|e| Error::io(&file, e))?;
        }
        Ok(added)
    }

    pub fn tasks(&self) -> Result<Vec<TaskSpec>> {
        let file = self.dir.join(TASKS_FILE);
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub paths: usize,
    pub jobs: usize,
    pub new_records: usize,
    pub total_records: usize,
}

fn select_paths(cfg: &RunConfig, all: Vec<Path>) -> Result<Vec<Path>> {
    let mut paths = if cfg.path_ids.is_empty() {
        all
    } else {
        let by_id: BTreeMap<&str, &Path> = all.iter().map(|p| (p.path_id.as_str(), p)).collect();
        cfg.path_ids
            .iter()
            .map(|id| by_id.get(id.as_str()).map(|p| (*p).clone()).ok_or_else(|| Error::Config(format!("unknown path id {id}"))))
            .collect::<Result<Vec<_>>>()?
    };
    if let Some(m) = cfg.max_paths {
        if m == 0 {
            return Err(Error::Config("max_paths must be positive".into()));
        }
        if m < paths.len() {
            let n = paths.len();
            paths = (0..m).map(|i| paths[i * n / m].clone()).collect();
        }
    }
    Ok(paths)
}

#[derive(Clone, Debug)]
struct Job {
    path: usize,
    task: usize,
    protocol: Protocol,
    seed: u64,
}

fn write_json(file: &FsPath, value: &impl Serialize) -> Result<()> {
    fs::write(file, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(file, e))
}

fn check_manifest(dir: &FsPath, cfg: &RunConfig) -> Result<()> {
    let hash = cfg.hash()?;
    let file = dir.join(MANIFEST_FILE);
    if file.exists() {
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.config_hash != hash {
            return Err(Error::Config(format!("{} was written by a different config ({} vs {hash})", dir.display(), m.config_hash)));
        }
        return Ok(());
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    write_json(&file, &RunManifest { name: cfg.name.clone(), config_hash: hash, created_unix })?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(dir, e))
}

/// Pretrained supernet for one objective, reusing a finished checkpoint.
fn supernet_for(
    dir: &FsPath,
    objective: SslObjective,
    paths: &[Path],
    config: SupernetConfig,
    corpus: &[Vec<usize>],
    settings: &PretrainSettings,
) -> Result<BlockRegistry> {
    let ckpt = dir.join("supernet").join(objective.name());
    let pcfg = settings.config(objective);
    let (mut reg, mut state) = match load_pretrain(&ckpt) {
        Ok((reg, state)) if reg.config == config => (reg, state),
        _ => (build_registry(paths, config, settings.seed)?, PretrainState::new(pcfg.optimizer)),
    };
    if state.step < pcfg.steps {
        pretrain(&mut reg, paths, corpus, &pcfg, &mut state)?;
        save_pretrain(&ckpt, &reg, &state)?;
    }
    Ok(reg)
}

/// Everything a stage needs before pretraining or fine-tuning.
struct Prepared {
    paths: Vec<Path>,
    tasks: Vec<(TaskSpec, LabeledDataset)>,
    specs: Vec<TaskSpec>,
    tokenizer: Tokenizer,
    ids: Vec<Vec<usize>>,
    sn_config: SupernetConfig,
}

fn prepare(cfg: &RunConfig, dir: &FsPath) -> Result<Prepared> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    check_manifest(dir, cfg).map_err(|e| e.in_stage("config"))?;

    let paths = compose_space(&cfg.space).and_then(|all| select_paths(cfg, all)).map_err(|e| e.in_stage("space"))?;
    save_manifest(&paths, &dir.join(PATHS_FILE)).map_err(|e| e.in_stage("space"))?;

    let (tasks, corpus) = load_tasks(cfg).map_err(|e| e.in_stage("data"))?;
    let specs: Vec<TaskSpec> = tasks.iter().map(|t| t.0.clone()).collect();
    write_json(&dir.join(TASKS_FILE), &specs).map_err(|e| e.in_stage("data"))?;
    let tokenizer = cfg.tokenizer.build(specs[0].modality, &corpus).map_err(|e| e.in_stage("tokenize"))?;
    let ids: Vec<Vec<usize>> = corpus.iter().map(|s| tokenizer.encode(s)).collect::<Result<_>>().map_err(|e| e.in_stage("tokenize"))?;
    let sn_config = SupernetConfig::for_paths(&paths, cfg.space.h0, tokenizer.vocab_size()).with_options(cfg.space.block_options);
    Ok(Prepared { paths, tasks, specs, tokenizer, ids, sn_config })
}

/// Pretrains (or resumes) the run's supernet for one objective.
pub fn pretrain_supernet(cfg: &RunConfig, dir: &FsPath, objective: SslObjective) -> Result<BlockRegistry> {
    let p = prepare(cfg, dir)?;
    supernet_for(dir, objective, &p.paths, p.sn_config, &p.ids, &cfg.pretrain).map_err(|e| e.in_stage("pretrain"))
}

/// Fine-tunes one path on one task and appends the record to the run's store.
/// Inheriting protocols pretrain their supernet first if no checkpoint exists.
pub fn finetune_one(cfg: &RunConfig, dir: &FsPath, path_id: &str, task_id: u32, protocol: Protocol, seed: u64) -> Result<PerfRecord> {
    let p = prepare(cfg, dir)?;
    let path = p.paths.iter().find(|x| x.path_id == path_id).ok_or_else(|| Error::Config(format!("unknown path id {path_id}")).in_stage("space"))?;
    let (spec, data) =
        p.tasks.iter().find(|t| t.0.task_id == task_id).ok_or_else(|| Error::Config(format!("unknown task id {task_id}")).in_stage("data"))?;
    let ft = FinetuneConfig { seed, ..cfg.finetune };
    let record = if protocol == Protocol::Foundation {
        let pcfg = cfg.pretrain.config(SslObjective::mm());
        let single = SupernetConfig::for_paths(std::slice::from_ref(path), cfg.space.h0, p.tokenizer.vocab_size())
            .with_options(cfg.space.block_options);
        let mut recs = foundation_flow(path, &single, &p.ids, &pcfg, &[(spec.clone(), data.clone())], &p.tokenizer, &ft)
            .map_err(|e| e.in_stage("foundation"))?;
        recs.pop().ok_or_else(|| Error::EmptyDataset.in_stage("foundation"))?
    } else if protocol.inherits() {
        let name = protocol.objective_name().expect("inheriting protocols have an objective");
        let objective = SslObjective::parse(name).map_err(|e| e.in_stage("pretrain"))?;
        let reg = supernet_for(dir, objective, &p.paths, p.sn_config, &p.ids, &cfg.pretrain).map_err(|e| e.in_stage("pretrain"))?;
        finetune(path, protocol, WeightSource::Inherit(&reg), spec, data, &p.tokenizer, &ft).map_err(|e| e.in_stage("finetune"))?.record
    } else {
        finetune(path, protocol, WeightSource::Scratch(&p.sn_config), spec, data, &p.tokenizer, &ft).map_err(|e| e.in_stage("finetune"))?.record
    };
    let mut store = ResultsStore::open(dir).map_err(|e| e.in_stage("store"))?;
    store.append(std::slice::from_ref(&record)).map_err(|e| e.in_stage("store"))?;
    Ok(record)
}

/// Runs (or resumes) the whole pipeline into `dir`.
pub fn run_experiment(cfg: &RunConfig, dir: &FsPath) -> Result<RunSummary> {
    let Prepared { paths, tasks, specs, tokenizer, ids, sn_config } = prepare(cfg, dir)?;
    let tok_id = tokenizer.id();

    let mut store = ResultsStore::open(dir).map_err(|e| e.in_stage("store"))?;
    let mut jobs = Vec::new();
    for (pi, path) in paths.iter().enumerate() {
        for (ti, (spec, _)) in tasks.iter().enumerate() {
            for &protocol in &cfg.protocols {
                for &seed in &cfg.seeds {
                    let probe = PerfRecord {
                        path_id: path.path_id.clone(),
                        task_id: spec.task_id,
                        protocol,
                        tokenizer_id: tok_id.clone(),
                        metric_value: 0.0,
                        seed,
                    };
                    if !store.contains(&record_key(&probe)) {
                        jobs.push(Job { path: pi, task: ti, protocol, seed });
                    }
                }
            }
        }
    }
    let total_jobs = paths.len() * tasks.len() * cfg.protocols.len() * cfg.seeds.len();

    let mut registries: BTreeMap<Protocol, BlockRegistry> = BTreeMap::new();
    let pending: BTreeSet<Protocol> = jobs.iter().map(|j| j.protocol).collect();
    for &protocol in &pending {
        if protocol == Protocol::Foundation || !protocol.inherits() {
            continue;
        }
        let name = protocol.objective_name().expect("inheriting protocols have an objective");
        let objective = SslObjective::parse(name).map_err(|e| e.in_stage("pretrain"))?;
        let reg = supernet_for(dir, objective, &paths, sn_config, &ids, &cfg.pretrain).map_err(|e| e.in_stage("pretrain"))?;
        registries.insert(protocol, reg);
    }

    let mut new_records = 0;
    let (foundation, grid): (Vec<Job>, Vec<Job>) = jobs.into_iter().partition(|j| j.protocol == Protocol::Foundation);
    let width = rayon::current_num_threads().max(1);
    for chunk in grid.chunks(width) {
        let records: Vec<PerfRecord> = chunk
            .par_iter()
            .map(|job| {
                let (spec, data) = &tasks[job.task];
                let source = match registries.get(&job.protocol) {
                    Some(reg) => WeightSource::Inherit(reg),
                    None => WeightSource::Scratch(&sn_config),
                };
                let ft = FinetuneConfig { seed: job.seed, ..cfg.finetune };
                finetune(&paths[job.path], job.protocol, source, spec, data, &tokenizer, &ft).map(|o| o.record)
            })
            .collect::<Result<_>>()
            .map_err(|e| e.in_stage("finetune"))?;
        new_records += store.append(&records).map_err(|e| e.in_stage("store"))?;
    }

    // Each foundation job pretrains its own single-path model.
    let mut done: BTreeSet<(usize, u64)> = BTreeSet::new();
    for job in &foundation {
        if !done.insert((job.path, job.seed)) {
            continue;
        }
        let pcfg = cfg.pretrain.config(SslObjective::mm());
        let ft = FinetuneConfig { seed: job.seed, ..cfg.finetune };
        let pending_tasks: Vec<(TaskSpec, LabeledDataset)> =
            foundation.iter().filter(|j| j.path == job.path && j.seed == job.seed).map(|j| tasks[j.task].clone()).collect();
        let single = SupernetConfig::for_paths(std::slice::from_ref(&paths[job.path]), cfg.space.h0, tokenizer.vocab_size())
            .with_options(cfg.space.block_options);
        let records = foundation_flow(&paths[job.path], &single, &ids, &pcfg, &pending_tasks, &tokenizer, &ft)
            .map_err(|e| e.in_stage("foundation"))?;
        new_records += store.append(&records).map_err(|e| e.in_stage("store"))?;
    }

    write_reports(store.records(), &specs, &dir.join("reports")).map_err(|e| e.in_stage("report"))?;
    Ok(RunSummary { paths: paths.len(), jobs: total_jobs, new_records, total_records: store.records().len() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    Leaderboard,
    TaskTable,
    Correlation,
}

impl ReportKind {
    pub const ALL: [ReportKind; 3] = [ReportKind::Leaderboard, ReportKind::TaskTable, ReportKind::Correlation];

    pub fn file_name(self) -> &'static str {
        match self {
            ReportKind::Leaderboard => "leaderboard.csv",
            ReportKind::TaskTable => "task_table.csv",
            ReportKind::Correlation => "correlation.csv",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "leaderboard" => Ok(Self::Leaderboard),
            "task-table" => Ok(Self::TaskTable),
            "correlation" => Ok(Self::Correlation),
            other => Err(Error::Config(format!("unknown report {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub protocol: Protocol,
    pub rank: usize,
    pub path_id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTableRow {
    pub path_id: String,
    pub task_id: u32,
    pub protocol: Protocol,
    pub tokenizer_id: String,
    pub seed: u64,
    pub metric_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub protocol_a: Protocol,
    pub protocol_b: Protocol,
    pub archs: usize,
    pub rho: f64,
}

fn by_protocol(records: &[PerfRecord]) -> BTreeMap<Protocol, Vec<PerfRecord>> {
    let mut out: BTreeMap<Protocol, Vec<PerfRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.protocol).or_default().push(r.clone());
    }
    out
}

pub fn leaderboard(records: &[PerfRecord], tasks: &[TaskSpec]) -> Result<Vec<LeaderboardRow>> {
    let mut rows = Vec::new();
    for (protocol, recs) in by_protocol(records) {
        let table = zscore_rank(&recs, tasks)?;
        for (i, id) in table.order.iter().enumerate() {
            rows.push(LeaderboardRow { protocol, rank: i + 1, path_id: id.clone(), score: table.scores[id] });
        }
    }
    Ok(rows)
}

/// Spearman between every protocol ranking of `a` and every one of `b`, over shared paths.
pub fn protocol_correlations(a: &[PerfRecord], b: &[PerfRecord], tasks: &[TaskSpec]) -> Result<Vec<CorrelationRow>> {
    let ranks = |recs: &[PerfRecord]| -> Result<BTreeMap<Protocol, BTreeMap<String, f64>>> {
        by_protocol(recs).into_iter().map(|(p, r)| Ok((p, zscore_rank(&r, tasks)?.scores))).collect()
    };
    let (ra, rb) = (ranks(a)?, ranks(b)?);
    let mut rows = Vec::new();
    for (pa, sa) in &ra {
        for (pb, sb) in &rb {
            let shared: BTreeSet<&String> = sa.keys().filter(|k| sb.contains_key(*k)).collect();
            let pick = |s: &BTreeMap<String, f64>| -> BTreeMap<String, f64> {
                s.iter().filter(|(k, _)| shared.contains(k)).map(|(k, v)| (k.clone(), *v)).collect()
            };
            let rho = if shared.len() < 2 { f64::NAN } else { spearman_rho(&pick(sa), &pick(sb))? };
            rows.push(CorrelationRow { protocol_a: *pa, protocol_b: *pb, archs: shared.len(), rho });
        }
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize>(file: &FsPath, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(file)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(file, e))
}

pub fn read_csv<T: DeserializeOwned>(file: &FsPath) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(file)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes one report into `out_dir`, returning the file path.
pub fn report(records: &[PerfRecord], tasks: &[TaskSpec], kind: ReportKind, out_dir: &FsPath) -> Result<PathBuf> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let file = out_dir.join(kind.file_name());
    match kind {
        ReportKind::Leaderboard => write_csv(&file, &leaderboard(records, tasks)?)?,
        ReportKind::TaskTable => {
            let mut rows: Vec<TaskTableRow> = records
                .iter()
                .map(|r| TaskTableRow {
                    path_id: r.path_id.clone(),
                    task_id: r.task_id,
                    protocol: r.protocol,
                    tokenizer_id: r.tokenizer_id.clone(),
                    seed: r.seed,
                    metric_value: r.metric_value,
                })
                .collect();
            rows.sort_by(|a, b| (&a.path_id, a.task_id, a.protocol, a.seed).cmp(&(&b.path_id, b.task_id, b.protocol, b.seed)));
            write_csv(&file, &rows)?
        }
        ReportKind::Correlation => write_csv(&file, &protocol_correlations(records, records, tasks)?)?,
    }
    Ok(file)
}

pub fn write_reports(records: &[PerfRecord], tasks: &[TaskSpec], out_dir: &FsPath) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    // Rankings need at least two architectures.
    let archs: BTreeSet<&str> = records.iter().map(|r| r.path_id.as_str()).collect();
    let kinds: &[ReportKind] = if archs.len() < 2 { &[ReportKind::TaskTable] } else { &ReportKind::ALL };
    kinds.iter().map(|&k| report(records, tasks, k, out_dir)).collect()
}

type LoadedTasks = (Vec<(TaskSpec, LabeledDataset)>, Vec<Sequence>);

/// Task data plus the unlabelled corpus of all training sequences.
fn load_tasks(cfg: &RunConfig) -> Result<LoadedTasks> {
    let tasks: Vec<(TaskSpec, LabeledDataset)> = cfg.tasks.iter().map(|t| t.load(&cfg.base_dir)).collect::<Result<_>>()?;
    let alphabet = tasks[0].0.modality;
    if tasks.iter().any(|t| t.0.modality != alphabet) {
        return Err(Error::Config("all tasks in a run must share one alphabet".into()));
    }
    let corpus = tasks.iter().flat_map(|(_, d)| d.split.train.iter().map(|&i| d.items[i].0.clone())).collect();
    Ok((tasks, corpus))
}

/// Tokenizer a run would build, for inspection from the command line.
pub fn run_tokenizer(cfg: &RunConfig) -> Result<Tokenizer> {
    let (tasks, corpus) = load_tasks(cfg)?;
    cfg.tokenizer.build(tasks[0].0.modality, &corpus)
}
