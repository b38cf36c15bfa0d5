use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path as FsPath, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use seqnas_core::agent::{rag_recommend, run_agent_pipeline, AgentConfig, KnowledgeBase, LlmClient};
use seqnas_core::eval::{PerfRecord, Protocol};
use seqnas_core::experiment::{
    finetune_one, leaderboard, pretrain_supernet, protocol_correlations, report, run_experiment, run_tokenizer, write_csv,
    ReportKind, ResultsStore, RunConfig, PATHS_FILE,
};
use seqnas_core::predictor::{
    embed_task, encode_arch, evaluate_predictor, predict_topk, zscore_samples, ArchEncoding, DimBounds, Predictor, PredictorConfig,
    TaskSplit,
};
use seqnas_core::space::{compose_space, load_manifest, save_manifest, space_stats, Path, SpaceConfig};
use seqnas_core::supernet::SslObjective;
use seqnas_core::tokenize::{save_bpe, BpeTokenizer};
use seqnas_core::{Alphabet, Sequence, TaskSpec, Tokenizer, TokenizerSpec};

#[derive(Parser)]
#[command(name = "seqnas", version, about = "Architecture search over hybrid sequence models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compose or summarize the search space.
    Space {
        #[command(subcommand)]
        action: SpaceAction,
    },
    /// Build a tokenizer or encode sequences.
    Tokenize {
        #[command(subcommand)]
        action: TokenizeAction,
    },
    /// Pretrain the shared supernet of a run.
    Supernet {
        #[command(subcommand)]
        action: SupernetAction,
    },
    /// Fine-tune one path on one task and store the record.
    Eval(EvalArgs),
    /// Rank the architectures of a run and write a leaderboard.
    Rank(RankArgs),
    /// Train, query or score the performance predictor.
    Predict {
        #[command(subcommand)]
        action: PredictAction,
    },
    /// Recommend architectures for a new task from a knowledge base.
    Agent {
        #[command(subcommand)]
        action: AgentAction,
    },
    /// Write CSV reports for a run.
    Report(ReportArgs),
    /// Run the whole pipeline for a config, resuming if the directory exists.
    Run(RunArgs),
}

#[derive(Subcommand)]
enum SpaceAction {
    Compose {
        /// Run config whose space to compose; the reference space when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Stats {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TokenizeAction {
    /// Build the tokenizer a run config would use and save it as JSON.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print token ids, one line per sequence.
    Encode {
        #[arg(long)]
        tokenizer: PathBuf,
        /// Needed for k-mer tokenizers; BPE files carry their own alphabet.
        #[arg(long, value_enum, default_value = "dna")]
        alphabet: AlphabetArg,
        sequences: Vec<String>,
    },
}

#[derive(Subcommand)]
enum SupernetAction {
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_parser = ["mm", "cl", "ntp"])]
        objective: String,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    path: String,
    #[arg(long)]
    task: u32,
    #[arg(long, value_parser = parse_protocol, default_value = "ONLY_FT")]
    protocol: Protocol,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    run: PathBuf,
    /// Rank only this protocol's records.
    #[arg(long, value_parser = parse_protocol)]
    protocol: Option<Protocol>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Setting {
    Supervised,
    Transfer,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long, value_enum, default_value = "supervised")]
    setting: Setting,
    /// Overrides the preset's training tasks.
    #[arg(long, value_delimiter = ',')]
    train_tasks: Vec<u32>,
    /// Overrides the preset's test tasks.
    #[arg(long, value_delimiter = ',')]
    test_tasks: Vec<u32>,
}

impl SplitArgs {
    fn split(&self) -> TaskSplit {
        let mut split = match self.setting {
            Setting::Supervised => TaskSplit::supervised(),
            Setting::Transfer => TaskSplit::transfer(),
        };
        if !self.train_tasks.is_empty() {
            split.train = self.train_tasks.clone();
        }
        if !self.test_tasks.is_empty() {
            split.test = self.test_tasks.clone();
        }
        split
    }
}

#[derive(Subcommand)]
enum PredictAction {
    Train {
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Option<Protocol>,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint stem; defaults to <run>/predictor/model.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Rank {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Task manifest (JSON) to rank architectures for.
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Option<Protocol>,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
        ks: Vec<usize>,
        /// Share of each task's best architectures counted as ground truth.
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Mock,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Pipeline,
    Rag,
}

#[derive(Subcommand)]
enum AgentAction {
    Recommend {
        /// Run directory or saved knowledge base JSON.
        #[arg(long)]
        kb: PathBuf,
        /// Task manifest (JSON) of the query task.
        #[arg(long)]
        task: PathBuf,
        #[arg(long, value_enum, default_value = "mock")]
        backend: Backend,
        #[arg(long, value_enum, default_value = "pipeline")]
        mode: Mode,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Option<Protocol>,
        /// Drop the query task from the knowledge base first.
        #[arg(long)]
        holdout: bool,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 3)]
        m: usize,
        /// Write the recommendation with its trace here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
    /// leaderboard, task-table or correlation; all when omitted.
    #[arg(long, value_parser = ReportKind::parse)]
    kind: Vec<ReportKind>,
    /// Correlate protocol rankings against this second run.
    #[arg(long)]
    against: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlphabetArg {
    Dna,
    Protein,
}

impl From<AlphabetArg> for Alphabet {
    fn from(a: AlphabetArg) -> Self {
        match a {
            AlphabetArg::Dna => Alphabet::Dna,
            AlphabetArg::Protein => Alphabet::Protein,
        }
    }
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    serde_json::from_value(serde_json::Value::String(s.to_uppercase().replace('-', "_"))).map_err(|_| format!("unknown protocol {s}"))
}

fn space_of(config: Option<&FsPath>) -> Result<SpaceConfig> {
    match config {
        Some(f) => Ok(RunConfig::load(f)?.space),
        None => Ok(SpaceConfig::reference()),
    }
}

/// Paths, tasks and records of a finished or partial run.
struct RunDir {
    dir: PathBuf,
    cfg: RunConfig,
    paths: Vec<Path>,
    tasks: Vec<TaskSpec>,
    records: Vec<PerfRecord>,
}

impl RunDir {
    fn open(dir: &FsPath) -> Result<Self> {
        let cfg_file = dir.join("config.toml");
        let text = fs::read_to_string(&cfg_file).with_context(|| format!("{} is not a run directory", dir.display()))?;
        let cfg = RunConfig::from_toml(&text)?;
        let paths = load_manifest(&dir.join(PATHS_FILE))?;
        let store = ResultsStore::open(dir)?;
        let tasks = store.tasks()?;
        Ok(Self { dir: dir.to_path_buf(), cfg, paths, tasks, records: store.records().to_vec() })
    }

    /// Records of one protocol: the requested one, else the first in the config.
    fn records_for(&self, protocol: Option<Protocol>) -> Result<Vec<PerfRecord>> {
        let p = match protocol.or_else(|| self.cfg.protocols.first().copied()) {
            Some(p) => p,
            None => bail!("run has no protocols"),
        };
        let recs: Vec<PerfRecord> = self.records.iter().filter(|r| r.protocol == p).cloned().collect();
        if recs.is_empty() {
            bail!("no {p} records in {}", self.dir.display());
        }
        Ok(recs)
    }

    fn encodings(&self) -> Result<BTreeMap<String, ArchEncoding>> {
        let bounds = DimBounds::from_space(&self.cfg.space)?;
        Ok(self
            .paths
            .iter()
            .map(|p| Ok((p.path_id.clone(), encode_arch(p, self.cfg.space.h0, bounds)?)))
            .collect::<seqnas_core::Result<_>>()?)
    }

    fn model_stem(&self, given: Option<PathBuf>) -> PathBuf {
        given.unwrap_or_else(|| self.dir.join("predictor").join("model"))
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn leaderboard_markdown(rows: &[seqnas_core::experiment::LeaderboardRow]) -> String {
    let mut md = String::from("| protocol | rank | path | score |\n|---|---:|---|---:|\n");
    for r in rows {
        md.push_str(&format!("| {} | {} | {} | {:.4} |\n", r.protocol, r.rank, r.path_id, r.score));
    }
    md
}

fn space(action: SpaceAction) -> Result<()> {
    match action {
        SpaceAction::Compose { config, out } => {
            let paths = compose_space(&space_of(config.as_deref())?)?;
            match out {
                Some(f) => {
                    save_manifest(&paths, &f)?;
                    eprintln!("{} paths -> {}", paths.len(), f.display());
                }
                None => print_json(&paths)?,
            }
        }
        SpaceAction::Stats { config } => {
            let cfg = space_of(config.as_deref())?;
            let paths = compose_space(&cfg)?;
            print_json(&space_stats(&cfg, &paths))?;
        }
    }
    Ok(())
}

fn tokenize(action: TokenizeAction) -> Result<()> {
    match action {
        TokenizeAction::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            match run_tokenizer(&cfg)? {
                Tokenizer::Bpe(t) => save_bpe(&t, &out)?,
                Tokenizer::Kmer(_) => fs::write(&out, serde_json::to_string_pretty(&cfg.tokenizer)?)?,
            }
            eprintln!("tokenizer -> {}", out.display());
        }
        TokenizeAction::Encode { tokenizer, alphabet, sequences } => {
            let text = fs::read_to_string(&tokenizer).with_context(|| tokenizer.display().to_string())?;
            let tok = match BpeTokenizer::from_json(&text) {
                Ok(t) => Tokenizer::Bpe(t),
                Err(_) => serde_json::from_str::<TokenizerSpec>(&text)?.build(alphabet.into(), &[])?,
            };
            let alphabet = match &tok {
                Tokenizer::Bpe(t) => t.alphabet,
                Tokenizer::Kmer(_) => alphabet.into(),
            };
            for s in sequences {
                let ids = tok.encode(&Sequence::new(&s, alphabet)?)?;
                println!("{}", ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" "));
            }
        }
    }
    Ok(())
}

fn predict(action: PredictAction) -> Result<()> {
    match action {
        PredictAction::Train { run, split, protocol, epochs, seed, out } => {
            let rd = RunDir::open(&run)?;
            let split = split.split();
            let records = rd.records_for(protocol)?;
            let train_tasks: Vec<TaskSpec> = rd.tasks.iter().filter(|t| split.train.contains(&t.task_id)).cloned().collect();
            let samples = zscore_samples(&records, &train_tasks);
            let embeddings: BTreeMap<u32, Vec<f64>> =
                train_tasks.iter().map(|t| Ok((t.task_id, embed_task(t)?))).collect::<seqnas_core::Result<_>>()?;
            let cfg = PredictorConfig { epochs, seed, ..Default::default() };
            let (model, losses) = Predictor::train(&samples, &rd.encodings()?, &embeddings, cfg)?;
            let stem = rd.model_stem(out);
            if let Some(parent) = stem.parent() {
                fs::create_dir_all(parent)?;
            }
            model.save(&stem)?;
            eprintln!("{} samples, final loss {:.4} -> {}", samples.len(), losses.last().copied().unwrap_or(f64::NAN), stem.display());
        }
        PredictAction::Rank { run, model, task, k } => {
            let rd = RunDir::open(&run)?;
            let model = Predictor::load(&rd.model_stem(model))?;
            let spec = TaskSpec::load(&task)?;
            let top = predict_topk(&model, &rd.paths, &rd.encodings()?, &embed_task(&spec)?, k)?;
            for id in top {
                println!("{id}");
            }
        }
        PredictAction::Eval { run, model, split, protocol, ks, fraction } => {
            let rd = RunDir::open(&run)?;
            let model = Predictor::load(&rd.model_stem(model))?;
            let records = rd.records_for(protocol)?;
            let test = split.split().test;
            let metrics = evaluate_predictor(&model, &rd.paths, &rd.encodings()?, &records, &rd.tasks, &test, &ks, fraction)?;
            print_json(&metrics)?;
        }
    }
    Ok(())
}

fn knowledge_base(source: &FsPath, protocol: Option<Protocol>) -> Result<KnowledgeBase> {
    if source.is_dir() {
        let rd = RunDir::open(source)?;
        Ok(KnowledgeBase::new(rd.tasks.clone(), rd.records_for(protocol)?)?)
    } else {
        Ok(KnowledgeBase::load(source)?)
    }
}

#[allow(clippy::too_many_arguments)]
fn recommend(
    kb: &FsPath,
    task: &FsPath,
    backend: Backend,
    mode: Mode,
    protocol: Option<Protocol>,
    holdout: bool,
    cfg: AgentConfig,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut kb = knowledge_base(kb, protocol)?;
    let query = TaskSpec::load(task)?;
    if holdout {
        kb = kb.without(query.task_id);
    }
    let client = match backend {
        Backend::Mock => LlmClient::echo(),
        Backend::Http => LlmClient::from_env()?,
    };
    let rec = match mode {
        Mode::Pipeline => run_agent_pipeline(&kb, &query, &client, &cfg)?,
        Mode::Rag => rag_recommend(&kb, &query, &client, &cfg)?,
    };
    for id in &rec.architectures {
        println!("{id}");
    }
    if let Some(f) = out {
        fs::write(&f, serde_json::to_string_pretty(&rec)?)?;
    }
    Ok(())
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    let rd = RunDir::open(&args.run)?;
    let out = rd.dir.join("reports");
    let kinds = if args.kind.is_empty() { ReportKind::ALL.to_vec() } else { args.kind };
    for kind in kinds {
        let file = match (&args.against, kind) {
            (Some(other), ReportKind::Correlation) => {
                let b = RunDir::open(other)?;
                let ids: BTreeSet<u32> = b.tasks.iter().map(|t| t.task_id).collect();
                let shared: Vec<TaskSpec> = rd.tasks.iter().filter(|t| ids.contains(&t.task_id)).cloned().collect();
                let file = out.join(kind.file_name());
                fs::create_dir_all(&out)?;
                write_csv(&file, &protocol_correlations(&rd.records, &b.records, &shared)?)?;
                file
            }
            _ => report(&rd.records, &rd.tasks, kind, &out)?,
        };
        println!("{}", file.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Space { action } => space(action)?,
        Command::Tokenize { action } => tokenize(action)?,
        Command::Supernet { action: SupernetAction::Pretrain { config, run, objective } } => {
            let cfg = RunConfig::load(&config)?;
            let reg = pretrain_supernet(&cfg, &run, SslObjective::parse(&objective)?)?;
            eprintln!("{} shared blocks -> {}", reg.len(), run.join("supernet").join(&objective).display());
        }
        Command::Eval(a) => {
            let cfg = RunConfig::load(&a.config)?;
            print_json(&finetune_one(&cfg, &a.run, &a.path, a.task, a.protocol, a.seed)?)?;
        }
        Command::Rank(a) => {
            let rd = RunDir::open(&a.run)?;
            let records = match a.protocol {
                Some(p) => rd.records_for(Some(p))?,
                None => rd.records.clone(),
            };
            let out = rd.dir.join("reports");
            let csv = report(&records, &rd.tasks, ReportKind::Leaderboard, &out)?;
            let md = leaderboard_markdown(&leaderboard(&records, &rd.tasks)?);
            fs::write(out.join("leaderboard.md"), &md)?;
            print!("{md}");
            eprintln!("-> {}", csv.display());
        }
        Command::Predict { action } => predict(action)?,
        Command::Agent { action: AgentAction::Recommend { kb, task, backend, mode, protocol, holdout, n, k, m, out } } => {
            let cfg = AgentConfig { n, k, m, ..Default::default() };
            recommend(&kb, &task, backend, mode, protocol, holdout, cfg, out)?;
        }
        Command::Report(a) => report_cmd(a)?,
        Command::Run(a) => {
            let cfg = RunConfig::load(&a.config)?;
            let summary = run_experiment(&cfg, &a.out)?;
            print_json(&summary)?;
        }
    }
    Ok(())
}
