//! Retrieval over past results and LLM-backed architecture recommendation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path as FsPath;
use std::sync::Arc;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Problem, TaskSpec};
use crate::error::{Error, Result};
use crate::eval::{perf_matrix, PerfRecord};
use crate::predictor::{cosine, embed_task};

pub const PROMPT_VERSION: &str = "1";
const RAG_TEMPLATE: &str = include_str!("../assets/prompts/rag.txt");
const ANALYST_TEMPLATE: &str = include_str!("../assets/prompts/analyst.txt");
const TASK_RETRIEVER_TEMPLATE: &str = include_str!("../assets/prompts/task_retriever.txt");
const PREDICTOR_TEMPLATE: &str = include_str!("../assets/prompts/predictor.txt");

/// Matches path ids produced by space composition.
pub const DEFAULT_ID_PATTERN: &str = r"d\d+-p\d+";

pub const ENV_ENDPOINT: &str = "SEQNAS_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "SEQNAS_LLM_API_KEY";
pub const ENV_MODEL: &str = "SEQNAS_LLM_MODEL";

fn problem_label(p: Problem) -> &'static str {
    match p {
        Problem::Regression => "regression",
        Problem::Binary | Problem::Multiclass(_) => "classification",
    }
}

fn describe(t: &TaskSpec) -> String {
    format!(
        "{} | problem: {} | modality: {} | metric: {:?}",
        t.description,
        problem_label(t.problem),
        t.modality.name(),
        t.metric
    )
}

/// Past tasks, their embeddings and measured results.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub tasks: BTreeMap<u32, TaskSpec>,
    pub embeddings: BTreeMap<u32, Vec<f64>>,
    pub records: Vec<PerfRecord>,
}

impl KnowledgeBase {
    pub fn new(tasks: Vec<TaskSpec>, records: Vec<PerfRecord>) -> Result<Self> {
        let mut kb = Self { records, ..Self::default() };
        for t in tasks {
            let emb = embed_task(&t)?;
            kb.insert_task(t, emb);
        }
        kb.validate()?;
        Ok(kb)
    }

    pub fn insert_task(&mut self, task: TaskSpec, embedding: Vec<f64>) {
        self.embeddings.insert(task.task_id, embedding);
        self.tasks.insert(task.task_id, task);
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if !self.tasks.contains_key(&r.task_id) {
                return Err(Error::Config(format!("record for unknown task {}", r.task_id)));
            }
        }
        for (id, e) in &self.embeddings {
            if e.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("task {id} has a non-finite embedding")));
            }
        }
        if self.tasks.keys().ne(self.embeddings.keys()) {
            return Err(Error::Config("every task needs an embedding".into()));
        }
        Ok(())
    }

    /// Copy with one task and its records removed.
    pub fn without(&self, task_id: u32) -> Self {
        let mut kb = self.clone();
        kb.tasks.remove(&task_id);
        kb.embeddings.remove(&task_id);
        kb.records.retain(|r| r.task_id != task_id);
        kb
    }

    pub fn arch_ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.path_id.as_str()).collect()
    }

    /// Best `k` architectures on a task by direction-aligned metric, ties by id.
    pub fn top_archs(&self, task_id: u32, k: usize) -> Vec<(String, f64)> {
        let Some(task) = self.tasks.get(&task_id) else { return Vec::new() };
        let s = f64::from(task.direction);
        let mut rows: Vec<(String, f64)> =
            perf_matrix(&self.records).into_iter().filter(|((_, t), _)| *t == task_id).map(|((a, _), v)| (a, v)).collect();
        rows.sort_by(|a, b| (s * b.1).total_cmp(&(s * a.1)).then_with(|| a.0.cmp(&b.0)));
        rows.truncate(k);
        rows
    }

    pub fn save(&self, path: &FsPath) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let kb: Self = serde_json::from_str(&text)?;
        kb.validate()?;
        Ok(kb)
    }
}

/// Top `n` tasks by cosine similarity to `query`, ties by task id.
pub fn retrieve_by_embedding(kb: &KnowledgeBase, query: &[f64], n: usize) -> Result<Vec<(u32, f64)>> {
    if kb.tasks.is_empty() {
        return Err(Error::EmptyContext);
    }
    if n > kb.tasks.len() {
        return Err(Error::TooFew { k: n, available: kb.tasks.len() });
    }
    let mut sims: Vec<(u32, f64)> = kb.embeddings.iter().map(|(id, e)| (*id, cosine(query, e))).collect();
    sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sims.truncate(n);
    Ok(sims)
}

pub fn retrieve_similar_tasks(kb: &KnowledgeBase, query: &TaskSpec, n: usize) -> Result<Vec<(u32, f64)>> {
    retrieve_by_embedding(kb, &embed_task(query)?, n)
}

fn ordinal(i: usize) -> String {
    match i {
        0 => "BEST CHOICE".into(),
        1 => "SECOND BEST".into(),
        2 => "THIRD BEST".into(),
        _ => format!("CHOICE {}", i + 1),
    }
}

fn render(template: &str, vars: &[(&str, &str)]) -> String {
    vars.iter().fold(template.to_string(), |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v))
}

fn task_lines(kb: &KnowledgeBase, ids: &[(u32, f64)]) -> String {
    let mut out = String::new();
    for (id, sim) in ids {
        let _ = writeln!(out, "- Task Index: {id} (similarity {sim:.4}) | {}", describe(&kb.tasks[id]));
    }
    out
}

/// The retrieval-augmented prompt: top-`n` tasks with their top-`k` architectures.
pub fn build_rag_prompt(kb: &KnowledgeBase, query: &TaskSpec, n: usize, k: usize, m: usize) -> Result<String> {
    if n == 0 || k == 0 {
        return Err(Error::EmptyContext);
    }
    let similar = retrieve_similar_tasks(kb, query, n)?;
    let mut perf = String::new();
    for (id, _) in &similar {
        let _ = writeln!(perf, "Task Index: {id} ({:?})", kb.tasks[id].metric);
        for (rank, (arch, v)) in kb.top_archs(*id, k).iter().enumerate() {
            let _ = writeln!(perf, "  {}. {arch}: {v:.4}", rank + 1);
        }
    }
    let slots: Vec<String> = (0..m).map(|i| format!("{}. {}: <architecture name> - <reason>", i + 1, ordinal(i))).collect();
    Ok(render(
        RAG_TEMPLATE,
        &[("tasks", &task_lines(kb, &similar)), ("performance", &perf), ("query", &describe(query)), ("slots", &slots.join("\n"))],
    ))
}

/// Extracts up to `m` distinct ids from recommendation lines.
///
/// A line counts when it carries an `Architecture:` field or is a numbered
/// `N. LABEL: name` entry; the first token fully matching `id` is taken.
pub fn parse_recommendations(text: &str, m: usize, id: &Regex) -> Result<Vec<String>> {
    let field = Regex::new(r"(?i)architecture:\s*(.*)$").expect("static pattern");
    let numbered = Regex::new(r"^\s*\d+\.\s*[A-Z][A-Z ]*:\s*(.*)$").expect("static pattern");
    let full = Regex::new(&format!("^(?:{})$", id.as_str())).map_err(|e| Error::Config(e.to_string()))?;
    let mut out: Vec<String> = Vec::new();
    for line in text.lines() {
        let Some(rest) = field.captures(line).or_else(|| numbered.captures(line)).map(|c| c[1].to_string()) else {
            continue;
        };
        let found = rest
            .split(|c: char| !(c.is_ascii_alphanumeric() || c == '-' || c == '_'))
            .find(|tok| full.is_match(tok))
            .map(str::to_string);
        if let Some(name) = found {
            if !out.contains(&name) {
                out.push(name);
            }
        }
        if out.len() == m {
            return Ok(out);
        }
    }
    Err(Error::PipelineParse { reason: format!("found {} of {m} architecture names", out.len()), trace: Vec::new() })
}

fn task_indices(text: &str) -> Vec<u32> {
    let re = Regex::new(r"(?i)task index:\s*\[?(\d+)").expect("static pattern");
    let mut out = Vec::new();
    for c in re.captures_iter(text) {
        if let Ok(id) = c[1].parse::<u32>() {
            if !out.contains(&id) {
                out.push(id);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Rag,
    Analyst,
    TaskRetriever,
    ArchRetriever,
    Predictor,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub role: Role,
    pub prompt: String,
}

impl ChatRequest {
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.prompt.as_bytes()))
    }
}

pub type Responder = Arc<dyn Fn(&ChatRequest) -> Result<String> + Send + Sync>;

#[derive(Clone)]
pub enum Transport {
    Http { api_key: Option<String> },
    Mock(Responder),
}

impl std::fmt::Debug for Transport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Transport::Http { .. } => f.write_str("Http"),
            Transport::Mock(_) => f.write_str("Mock"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LlmClient {
    pub endpoint: String,
    pub model: String,
    pub timeout: Duration,
    pub transport: Transport,
}

impl LlmClient {
    pub fn mock(responder: impl Fn(&ChatRequest) -> Result<String> + Send + Sync + 'static) -> Self {
        Self { endpoint: "mock://".into(), model: "mock".into(), timeout: Duration::from_secs(1), transport: Transport::Mock(Arc::new(responder)) }
    }

    /// Replays responses keyed by prompt hash.
    pub fn canned(responses: BTreeMap<String, String>) -> Self {
        Self::mock(move |req| {
            responses.get(&req.hash()).cloned().ok_or_else(|| Error::Transport(format!("no canned response for {}", req.hash())))
        })
    }

    /// Answers every role by copying the retrieval order it was given.
    pub fn echo() -> Self {
        Self::mock(echo_response)
    }

    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT).map_err(|_| Error::Config(format!("{ENV_ENDPOINT} is not set")))?;
        Ok(Self {
            endpoint,
            model: std::env::var(ENV_MODEL).unwrap_or_else(|_| "gpt-4o".into()),
            timeout: Duration::from_secs(120),
            transport: Transport::Http { api_key: std::env::var(ENV_API_KEY).ok() },
        })
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<String> {
        match &self.transport {
            Transport::Mock(f) => f(req),
            Transport::Http { api_key } => {
                let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(self.timeout)).build().into();
                let body = serde_json::json!({
                    "model": self.model,
                    "temperature": 0,
                    "messages": [{"role": "user", "content": req.prompt}],
                });
                let mut call = agent.post(&self.endpoint);
                if let Some(key) = api_key {
                    call = call.header("Authorization", &format!("Bearer {key}"));
                }
                let mut resp = call.send_json(&body).map_err(|e| Error::Transport(e.to_string()))?;
                let value: serde_json::Value = resp.body_mut().read_json().map_err(|e| Error::Transport(e.to_string()))?;
                value["choices"][0]["message"]["content"]
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| Error::Transport("response has no message content".into()))
            }
        }
    }
}

fn echo_response(req: &ChatRequest) -> Result<String> {
    let p = &req.prompt;
    Ok(match req.role {
        Role::Analyst => {
            let query = p.split("Task:\n").nth(1).and_then(|s| s.lines().next()).unwrap_or("");
            format!("Task Summary:\n- {query}\n\nSearch Parameters:\n- Task Description: {query}\n")
        }
        Role::TaskRetriever => {
            let n: usize = Regex::new(r"Pick the (\d+) tasks").expect("static pattern").captures(p).map_or(1, |c| c[1].parse().unwrap_or(1));
            let ids = task_indices(p.split("Candidate tasks:").nth(1).unwrap_or(""));
            ids.iter().take(n).map(|i| format!("Task Index: {i}\n")).collect()
        }
        Role::Predictor | Role::Rag | Role::ArchRetriever => {
            let section = p.split("Retrieved architectures:").nth(1).or_else(|| p.split("Performance Data:").nth(1)).unwrap_or("");
            let names: Vec<&str> = section
                .lines()
                .filter_map(|l| l.trim().split_once(". ").and_then(|(_, rest)| rest.split(':').next()))
                .filter(|n| !n.is_empty() && !n.contains(' '))
                .collect();
            let mut seen = Vec::new();
            for n in names {
                if !seen.contains(&n) {
                    seen.push(n);
                }
            }
            seen.iter().enumerate().map(|(i, n)| format!("{}. pick\n- Architecture: {n}\n", i + 1)).collect()
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    /// Similar tasks retrieved.
    pub n: usize,
    /// Architectures per retrieved task.
    pub k: usize,
    /// Architectures recommended.
    pub m: usize,
    pub retries: usize,
    pub id_pattern: String,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self { n: 3, k: 5, m: 3, retries: 2, id_pattern: DEFAULT_ID_PATTERN.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub role: Role,
    pub input: String,
    pub output: String,
    pub attempts: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub stages: Vec<StageTrace>,
}

impl AgentTrace {
    fn summary(&self) -> Vec<String> {
        self.stages.iter().map(|s| format!("{:?}: {}", s.role, s.output)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub architectures: Vec<String>,
    pub trace: AgentTrace,
}

/// Calls the client until `parse` accepts the output, at most `1 + retries` times.
fn call_role<T>(
    client: &LlmClient,
    role: Role,
    prompt: String,
    retries: usize,
    trace: &mut AgentTrace,
    parse: impl Fn(&str) -> Result<T>,
) -> Result<T> {
    let req = ChatRequest { role, prompt };
    let mut last = String::new();
    for attempt in 1..=retries + 1 {
        let out = client.complete(&req)?;
        match parse(&out) {
            Ok(v) => {
                trace.stages.push(StageTrace { role, input: req.prompt, output: out, attempts: attempt });
                return Ok(v);
            }
            Err(e) => last = e.to_string(),
        }
        if attempt == retries + 1 {
            trace.stages.push(StageTrace { role, input: req.prompt.clone(), output: out, attempts: attempt });
        }
    }
    Err(Error::PipelineParse { reason: format!("{role:?}: {last}"), trace: trace.summary() })
}

fn names_in_kb(names: Vec<String>, allowed: &BTreeSet<&str>) -> Result<Vec<String>> {
    match names.iter().find(|n| !allowed.contains(n.as_str())) {
        Some(bad) => Err(Error::PipelineParse { reason: format!("unknown architecture {bad}"), trace: Vec::new() }),
        None => Ok(names),
    }
}

fn id_regex(cfg: &AgentConfig) -> Result<Regex> {
    Regex::new(&cfg.id_pattern).map_err(|e| Error::Config(format!("id pattern: {e}")))
}

/// Single-call recommendation from the retrieval-augmented prompt.
pub fn rag_recommend(kb: &KnowledgeBase, query: &TaskSpec, client: &LlmClient, cfg: &AgentConfig) -> Result<Recommendation> {
    let id = id_regex(cfg)?;
    let allowed = kb.arch_ids();
    let prompt = build_rag_prompt(kb, query, cfg.n, cfg.k, cfg.m)?;
    let mut trace = AgentTrace::default();
    let architectures = call_role(client, Role::Rag, prompt, cfg.retries, &mut trace, |out| {
        names_in_kb(parse_recommendations(out, cfg.m, &id)?, &allowed)
    })?;
    Ok(Recommendation { architectures, trace })
}

/// Analyst, task retriever, local architecture lookup, then predictor.
pub fn run_agent_pipeline(kb: &KnowledgeBase, query: &TaskSpec, client: &LlmClient, cfg: &AgentConfig) -> Result<Recommendation> {
    if cfg.n == 0 || cfg.k == 0 || cfg.m == 0 {
        return Err(Error::EmptyContext);
    }
    let id = id_regex(cfg)?;
    let allowed = kb.arch_ids();
    let mut trace = AgentTrace::default();

    let prompt = render(ANALYST_TEMPLATE, &[("query", &describe(query))]);
    let analysis = call_role(client, Role::Analyst, prompt, cfg.retries, &mut trace, |out| {
        if out.contains("Task Description:") {
            Ok(out.to_string())
        } else {
            Err(Error::PipelineParse { reason: "missing Task Description field".into(), trace: Vec::new() })
        }
    })?;

    // Candidates come from the same embedding retrieval the RAG prompt uses.
    let pool = retrieve_similar_tasks(kb, query, (2 * cfg.n).min(kb.tasks.len()))?;
    let candidate_ids: BTreeSet<u32> = pool.iter().map(|p| p.0).collect();
    let n = cfg.n.min(pool.len());
    let prompt = render(
        TASK_RETRIEVER_TEMPLATE,
        &[("n", &n.to_string()), ("analysis", &analysis), ("tasks", &task_lines(kb, &pool))],
    );
    let chosen = call_role(client, Role::TaskRetriever, prompt, cfg.retries, &mut trace, |out| {
        let ids = task_indices(out);
        if let Some(bad) = ids.iter().find(|i| !candidate_ids.contains(i)) {
            return Err(Error::PipelineParse { reason: format!("unknown task index {bad}"), trace: Vec::new() });
        }
        if ids.is_empty() {
            return Err(Error::PipelineParse { reason: "no Task Index lines".into(), trace: Vec::new() });
        }
        Ok(ids.into_iter().take(n).collect::<Vec<u32>>())
    })?;

    let mut listing = String::new();
    let mut seen = BTreeSet::new();
    let mut rank = 0;
    for t in &chosen {
        for (arch, v) in kb.top_archs(*t, cfg.k) {
            if seen.insert(arch.clone()) {
                rank += 1;
                let _ = writeln!(listing, "{rank}. {arch}: {v:.4} on task {t} ({:?})", kb.tasks[t].metric);
            }
        }
    }
    trace.stages.push(StageTrace {
        role: Role::ArchRetriever,
        input: chosen.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","),
        output: listing.clone(),
        attempts: 1,
    });
    let m = cfg.m.min(rank);
    if m == 0 {
        return Err(Error::EmptyContext);
    }

    let slots: Vec<String> = (0..m).map(|i| format!("{}. {}\n- Architecture: <name>", i + 1, ordinal(i))).collect();
    let prompt = render(
        PREDICTOR_TEMPLATE,
        &[("m", &m.to_string()), ("query", &describe(query)), ("architectures", &listing), ("slots", &slots.join("\n\n"))],
    );
    let architectures = call_role(client, Role::Predictor, prompt, cfg.retries, &mut trace, |out| {
        names_in_kb(parse_recommendations(out, m, &id)?, &allowed)
    })?;
    Ok(Recommendation { architectures, trace })
}
