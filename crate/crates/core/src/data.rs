//! Sequences, task definitions, labelled datasets and synthetic tasks.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Alphabet {
    #[serde(rename = "DNA")]
    Dna,
    #[serde(rename = "PROTEIN")]
    Protein,
}

impl Alphabet {
    /// Residue symbols, wildcard last.
    pub fn symbols(self) -> &'static str {
        match self {
            Alphabet::Dna => "ACGTN",
            Alphabet::Protein => "ACDEFGHIKLMNPQRSTVWYX",
        }
    }

    /// Symbols without the wildcard.
    pub fn core_symbols(self) -> &'static str {
        let s = self.symbols();
        &s[..s.len() - 1]
    }

    pub fn wildcard(self) -> char {
        match self {
            Alphabet::Dna => 'N',
            Alphabet::Protein => 'X',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Alphabet::Dna => "DNA",
            Alphabet::Protein => "PROTEIN",
        }
    }

    pub fn contains(self, c: char) -> bool {
        self.symbols().contains(c)
    }
}

impl fmt::Display for Alphabet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A validated, upper-case residue string.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sequence {
    residues: String,
    alphabet: Alphabet,
}

impl Sequence {
    pub fn new(residues: &str, alphabet: Alphabet) -> Result<Self> {
        let residues = residues.trim().to_ascii_uppercase();
        if residues.is_empty() {
            return Err(Error::SequenceTooShort { len: 0, k: 1 });
        }
        if let Some(bad) = residues.chars().find(|&c| !alphabet.contains(c)) {
            return Err(Error::InvalidResidue { residue: bad, alphabet: alphabet.name() });
        }
        Ok(Self { residues, alphabet })
    }

    pub fn residues(&self) -> &str {
        &self.residues
    }

    pub fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Problem {
    Binary,
    Multiclass(usize),
    Regression,
}

impl Problem {
    /// Width of the task head output.
    pub fn outputs(self) -> usize {
        match self {
            Problem::Binary => 2,
            Problem::Multiclass(k) => k,
            Problem::Regression => 1,
        }
    }

    pub fn accepts(self, label: f64) -> bool {
        match self {
            Problem::Binary => label == 0.0 || label == 1.0,
            Problem::Multiclass(k) => label.fract() == 0.0 && label >= 0.0 && (label as usize) < k,
            Problem::Regression => label.is_finite(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Accuracy,
    Mcc,
    Rmse,
    Spearman,
}

impl MetricKind {
    /// +1 when larger is better, -1 for error-like metrics.
    pub fn direction(self) -> i8 {
        match self {
            MetricKind::Rmse => -1,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u32,
    pub description: String,
    pub modality: Alphabet,
    pub problem: Problem,
    pub metric: MetricKind,
    pub direction: i8,
}

impl TaskSpec {
    pub fn new(task_id: u32, description: impl Into<String>, modality: Alphabet, problem: Problem, metric: MetricKind) -> Result<Self> {
        let spec = Self {
            task_id,
            description: description.into(),
            modality,
            problem,
            direction: metric.direction(),
            metric,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.description.trim().is_empty() {
            return Err(Error::Config(format!("task {} has an empty description", self.task_id)));
        }
        if self.direction != self.metric.direction() {
            return Err(Error::Config(format!(
                "task {}: direction {} does not match metric {:?}",
                self.task_id, self.direction, self.metric
            )));
        }
        if matches!(self.problem, Problem::Multiclass(k) if k < 2) {
            return Err(Error::Config(format!("task {}: multiclass needs at least 2 classes", self.task_id)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: TaskSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded shuffle of `0..n` cut 8:1:1. Validation and test each get at
    /// least one item when `n >= 3`.
    pub fn seeded(n: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut n_valid = n / 10;
        let mut n_test = n / 10;
        if n >= 3 {
            n_valid = n_valid.max(1);
            n_test = n_test.max(1);
        }
        let n_train = n - n_valid - n_test;
        let mut train = idx[..n_train].to_vec();
        let mut valid = idx[n_train..n_train + n_valid].to_vec();
        let mut test = idx[n_train + n_valid..].to_vec();
        train.sort_unstable();
        valid.sort_unstable();
        test.sort_unstable();
        Self { train, valid, test }
    }

    /// Disjoint and covering `0..n`.
    pub fn is_partition_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.valid).chain(&self.test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return false;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub items: Vec<(Sequence, f64)>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(items: Vec<(Sequence, f64)>, split: Split) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !split.is_partition_of(items.len()) {
            return Err(Error::Config("split is not a partition of the items".into()));
        }
        Ok(Self { items, split })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn check_labels(&self, problem: Problem) -> Result<()> {
        match self.items.iter().position(|(_, y)| !problem.accepts(*y)) {
            Some(i) => Err(Error::Config(format!("item {i}: label {} does not fit {problem:?}", self.items[i].1))),
            None => Ok(()),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<&(Sequence, f64)> {
        idx.iter().map(|&i| &self.items[i]).collect()
    }
}

/// Reads `sequence<TAB>label` lines; blank lines are skipped. The 8:1:1
/// split is seeded with `split_seed`.
pub fn load_plain_seeded(path: &Path, alphabet: Alphabet, split_seed: u64) -> Result<LabeledDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_plain(&text, alphabet, split_seed)
}

pub fn load_plain(path: &Path, alphabet: Alphabet) -> Result<LabeledDataset> {
    load_plain_seeded(path, alphabet, 0)
}

pub fn parse_plain(text: &str, alphabet: Alphabet, split_seed: u64) -> Result<LabeledDataset> {
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (seq, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::MalformedLine { line: line_no, reason: "expected sequence<TAB>label".into() })?;
        let label: f64 = label
            .trim()
            .parse()
            .map_err(|_| Error::MalformedLine { line: line_no, reason: format!("bad label {label:?}") })?;
        let seq = Sequence::new(seq, alphabet).map_err(|e| match e {
            Error::InvalidResidue { .. } => e,
            other => Error::MalformedLine { line: line_no, reason: other.to_string() },
        })?;
        items.push((seq, label));
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let split = Split::seeded(items.len(), split_seed);
    LabeledDataset::new(items, split)
}

pub fn write_plain(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (s, y) in &ds.items {
        out.push_str(s.residues());
        out.push('\t');
        out.push_str(&y.to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn random_residues(rng: &mut ChaCha8Rng, alphabet: &[u8], len: usize) -> Vec<u8> {
    (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

/// Balanced binary task: positives carry `motif` at a uniform position with
/// each planted residue replaced with probability `noise`; negatives are
/// uniform background guaranteed not to contain the motif.
pub fn gen_motif_task(seed: u64, n: usize, len: usize, motif: &str, noise: f64) -> Result<(TaskSpec, LabeledDataset)> {
    let motif = motif.to_ascii_uppercase();
    if motif.is_empty() || motif.len() > len {
        return Err(Error::Config(format!("motif of length {} does not fit in length {len}", motif.len())));
    }
    if !(0.0..0.5).contains(&noise) {
        return Err(Error::Config(format!("noise {noise} outside [0, 0.5)")));
    }
    if n < 2 {
        return Err(Error::EmptyDataset);
    }
    let alphabet = Alphabet::Dna;
    let bases = alphabet.core_symbols().as_bytes();
    if let Some(bad) = motif.chars().find(|&c| !alphabet.core_symbols().contains(c)) {
        return Err(Error::InvalidResidue { residue: bad, alphabet: alphabet.name() });
    }
    let m = motif.as_bytes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { 0.0 }).collect();
    labels.shuffle(&mut rng);
    let mut items = Vec::with_capacity(n);
    for &y in &labels {
        let mut s = random_residues(&mut rng, bases, len);
        if y == 1.0 {
            let at = rng.random_range(0..=len - m.len());
            for (j, &c) in m.iter().enumerate() {
                s[at + j] = if rng.random::<f64>() < noise {
                    let others: Vec<u8> = bases.iter().copied().filter(|&b| b != c).collect();
                    others[rng.random_range(0..others.len())]
                } else {
                    c
                };
            }
        } else {
            // Rejection keeps negatives motif-free; give up after a bounded number of tries.
            for _ in 0..1000 {
                if !contains(&s, m) {
                    break;
                }
                s = random_residues(&mut rng, bases, len);
            }
        }
        let text = String::from_utf8(s).expect("ascii residues");
        items.push((Sequence::new(&text, alphabet)?, y));
    }
    let spec = TaskSpec::new(
        0,
        format!("Predict whether a DNA sequence contains the binding motif {motif} (binary classification)"),
        alphabet,
        Problem::Binary,
        MetricKind::Accuracy,
    )?;
    let split = Split::seeded(n, seed ^ 0x5eed);
    Ok((spec, LabeledDataset::new(items, split)?))
}

/// Regression task whose label is the GC fraction of the sequence.
pub fn gen_gc_task(seed: u64, n: usize, len: usize) -> Result<(TaskSpec, LabeledDataset)> {
    if n < 2 || len == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n);
    for _ in 0..n {
        let gc_bias: f64 = rng.random_range(0.2..0.8);
        let s: String = (0..len)
            .map(|_| {
                let gc = rng.random::<f64>() < gc_bias;
                let pick = rng.random::<bool>();
                match (gc, pick) {
                    (true, true) => 'G',
                    (true, false) => 'C',
                    (false, true) => 'A',
                    (false, false) => 'T',
                }
            })
            .collect();
        let y = s.chars().filter(|c| matches!(c, 'G' | 'C')).count() as f64 / len as f64;
        items.push((Sequence::new(&s, Alphabet::Dna)?, y));
    }
    let spec = TaskSpec::new(
        0,
        "Regress the GC content fraction of a DNA sequence",
        Alphabet::Dna,
        Problem::Regression,
        MetricKind::Rmse,
    )?;
    Ok((spec, LabeledDataset::new(items, Split::seeded(n, seed ^ 0x5eed))?))
}

/// Unlabelled corpus drawn from a deterministic repeating pattern.
pub fn repeating_corpus(pattern: &str, n: usize, len: usize, alphabet: Alphabet) -> Result<Vec<Sequence>> {
    if pattern.is_empty() || len == 0 {
        return Err(Error::EmptyCorpus);
    }
    let p: Vec<char> = pattern.chars().collect();
    (0..n)
        .map(|i| {
            let s: String = (0..len).map(|t| p[(i + t) % p.len()]).collect();
            Sequence::new(&s, alphabet)
        })
        .collect()
}
