pub mod agent;
pub mod autodiff;
pub mod blocks;
pub mod data;
pub mod error;
pub mod predictor;
pub mod eval;
pub mod experiment;
pub mod space;
pub mod supernet;
pub mod tokenize;

pub use autodiff::{AdamW, AdamWConfig, Graph, NodeId, ParamStore, Tensor};
pub use data::{Alphabet, LabeledDataset, MetricKind, Problem, Sequence, Split, TaskSpec};
pub use error::{Error, Result};
pub use tokenize::{BpeTokenizer, KmerTokenizer, Tokenizer, TokenizerSpec, Vocab};
