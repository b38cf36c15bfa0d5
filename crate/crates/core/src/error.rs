use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("invalid residue {residue:?} for alphabet {alphabet}")]
    InvalidResidue { residue: char, alphabet: &'static str },
    #[error("sequence of length {len} is shorter than k = {k}")]
    SequenceTooShort { len: usize, k: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter {param} ({count} entries)")]
    NonFiniteGradient { param: String, count: usize },
    #[error("non-finite loss at step {step}")]
    Divergence { step: usize, trace: Vec<f64> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("block key {0} is not present in the registry")]
    MissingBlock(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("missing (architecture, task) pairs: {0:?}")]
    MissingPairs(Vec<(String, u32)>),
    #[error("k = {k} exceeds the {available} available items")]
    TooFew { k: usize, available: usize },
    #[error("identifier sets differ")]
    MismatchedIds,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("retrieval context is empty")]
    EmptyContext,
    #[error("could not parse agent output ({reason}); trace has {} stages", trace.len())]
    PipelineParse { reason: String, trace: Vec<String> },
    #[error("llm transport: {0}")]
    Transport(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}
