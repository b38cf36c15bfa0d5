//! Reverse-mode differentiation, parameter storage, optimizer and checkpoints.

mod check;
mod checkpoint;
mod fft;
mod graph;
mod optim;
mod tensor;

use std::collections::BTreeMap;

pub use check::{gradient_check, param_gradient_check, relative_error};
pub use checkpoint::{load_checkpoint, save_checkpoint, ManifestEntry};
pub use graph::{BatchStats, Gradients, Graph, NodeId, Unary};
pub use optim::{AdamW, AdamWConfig, Schedule};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Named tensors: trainable parameters plus non-trainable buffers such as
/// batch-norm running statistics. Only tensors bound through [`ParamStore::bind`]
/// receive gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        Ok(g.param(name, self.get(name)?))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Tensors whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor)> + 'a {
        self.tensors.range(prefix.to_string()..).take_while(move |(k, _)| k.starts_with(prefix))
    }

    /// Copies every tensor of `other`, overwriting same-named entries.
    pub fn extend_from(&mut self, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}
