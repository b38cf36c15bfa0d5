//! k-mer and byte-pair-encoding tokenizers over residue strings.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Alphabet, Sequence};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const CLS: usize = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[MASK]", "[CLS]"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    to_id: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Specials at ids 0..4 followed by `tokens` in order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut v = Vocab { to_id: HashMap::new(), tokens: Vec::new() };
        for s in SPECIALS {
            v.push(s.to_string());
        }
        for t in tokens {
            v.push(t);
        }
        v
    }

    fn push(&mut self, t: String) -> usize {
        if let Some(&id) = self.to_id.get(&t) {
            return id;
        }
        let id = self.tokens.len();
        self.to_id.insert(t.clone(), id);
        self.tokens.push(t);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn as_map(&self) -> BTreeMap<String, usize> {
        self.to_id.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }

    fn from_map(map: BTreeMap<String, usize>) -> Result<Self> {
        let mut tokens = vec![None; map.len()];
        for (t, id) in map {
            match tokens.get_mut(id) {
                Some(slot @ None) => *slot = Some(t),
                _ => return Err(Error::Config(format!("vocab id {id} is duplicated or out of range"))),
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.expect("dense ids")).collect();
        if tokens.iter().take(4).map(String::as_str).ne(SPECIALS) {
            return Err(Error::Config("vocab must start with the four special tokens".into()));
        }
        Ok(Vocab::from_tokens(tokens.into_iter().skip(4)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KmerTokenizer {
    pub k: usize,
    pub overlapping: bool,
    pub alphabet: Alphabet,
    vocab: Vocab,
}

impl KmerTokenizer {
    /// For `k = 1` the wildcard is its own token; for longer k-mers any
    /// wildcard maps to UNK, so the vocabulary is `core^k` plus specials.
    pub fn new(k: usize, overlapping: bool, alphabet: Alphabet) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let symbols: Vec<char> = if k == 1 { alphabet.symbols() } else { alphabet.core_symbols() }.chars().collect();
        let count = symbols.len().checked_pow(k as u32).filter(|&c| c <= 1 << 22);
        let Some(count) = count else {
            return Err(Error::Config(format!("{}^{k} k-mers is too many", symbols.len())));
        };
        let kmers = (0..count).map(|mut i| {
            let mut s = vec![' '; k];
            for slot in s.iter_mut().rev() {
                *slot = symbols[i % symbols.len()];
                i /= symbols.len();
            }
            s.into_iter().collect::<String>()
        });
        Ok(Self { k, overlapping, alphabet, vocab: Vocab::from_tokens(kmers) })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn encode(&self, seq: &Sequence) -> Result<Vec<usize>> {
        let s = seq.residues();
        if s.len() < self.k {
            return Err(Error::SequenceTooShort { len: s.len(), k: self.k });
        }
        let stride = if self.overlapping { 1 } else { self.k };
        Ok((0..=s.len() - self.k)
            .step_by(stride)
            .map(|i| self.vocab.id(&s[i..i + self.k]).unwrap_or(UNK))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeTokenizer {
    pub alphabet: Alphabet,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    vocab: Vocab,
}

#[derive(Serialize, Deserialize)]
struct BpeFile {
    alphabet: Alphabet,
    merges: Vec<(String, String)>,
    vocab: BTreeMap<String, usize>,
}

impl BpeTokenizer {
    fn from_merges(alphabet: Alphabet, merges: Vec<(String, String)>) -> Self {
        let base = alphabet.symbols().chars().map(String::from);
        let merged = merges.iter().map(|(l, r)| format!("{l}{r}"));
        let vocab = Vocab::from_tokens(base.chain(merged));
        let ranks = merges.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        Self { alphabet, merges, ranks, vocab }
    }

    /// Learns up to `vocab_size - base` merges. Each round merges the most
    /// frequent adjacent pair, ties to the lexicographically smallest
    /// `(left, right)`; training stops early once no pair occurs twice.
    pub fn train(corpus: &[Sequence], vocab_size: usize) -> Result<Self> {
        let first = corpus.first().ok_or(Error::EmptyCorpus)?;
        let alphabet = first.alphabet();
        let base = alphabet.symbols().len() + SPECIALS.len();
        if vocab_size <= base {
            return Err(Error::Config(format!("vocab_size {vocab_size} must exceed the base vocabulary of {base}")));
        }
        if let Some(other) = corpus.iter().find(|s| s.alphabet() != alphabet) {
            return Err(Error::Config(format!("mixed alphabets in corpus: {alphabet} and {}", other.alphabet())));
        }
        let mut words: BTreeMap<&str, usize> = BTreeMap::new();
        for s in corpus {
            *words.entry(s.residues()).or_default() += 1;
        }
        let mut words: Vec<(Vec<String>, usize)> =
            words.into_iter().map(|(w, c)| (w.chars().map(String::from).collect(), c)).collect();
        let mut merges = Vec::new();
        while merges.len() < vocab_size - base {
            let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
            for (w, c) in &words {
                for pair in w.windows(2) {
                    *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += c;
                }
            }
            let best = counts
                .into_iter()
                .filter(|&(_, c)| c >= 2)
                .min_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let Some(((l, r), _)) = best else { break };
            let pair = (l.to_string(), r.to_string());
            for (w, _) in &mut words {
                *w = merge_pair(std::mem::take(w), &pair);
            }
            merges.push(pair);
        }
        Ok(Self::from_merges(alphabet, merges))
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Token strings after applying merges in training order.
    pub fn encode_tokens(&self, seq: &Sequence) -> Vec<String> {
        let mut parts: Vec<String> = seq.residues().chars().map(String::from).collect();
        loop {
            let best = parts
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, p[0].clone(), p[1].clone())))
                .min();
            let Some((_, l, r)) = best else { break };
            parts = merge_pair(parts, &(l, r));
        }
        parts
    }

    pub fn encode(&self, seq: &Sequence) -> Vec<usize> {
        self.encode_tokens(seq).iter().map(|t| self.vocab.id(t).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIALS.len())
            .filter_map(|&i| self.vocab.token(i))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = BpeFile { alphabet: self.alphabet, merges: self.merges.clone(), vocab: self.vocab.as_map() };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: BpeFile = serde_json::from_str(text)?;
        let tok = Self::from_merges(file.alphabet, file.merges);
        if Vocab::from_map(file.vocab)? != tok.vocab {
            return Err(Error::Config("stored vocab disagrees with the merge list".into()));
        }
        Ok(tok)
    }
}

/// Left-to-right non-overlapping replacement of `pair` by its concatenation.
fn merge_pair(parts: Vec<String>, pair: &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(parts.len());
    let mut i = 0;
    while i < parts.len() {
        if i + 1 < parts.len() && parts[i] == pair.0 && parts[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(parts[i].clone());
            i += 1;
        }
    }
    out
}

/// Either tokenizer behind one interface.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tokenizer {
    Kmer(KmerTokenizer),
    Bpe(BpeTokenizer),
}

impl Tokenizer {
    pub fn encode(&self, seq: &Sequence) -> Result<Vec<usize>> {
        match self {
            Tokenizer::Kmer(t) => t.encode(seq),
            Tokenizer::Bpe(t) => Ok(t.encode(seq)),
        }
    }

    pub fn vocab(&self) -> &Vocab {
        match self {
            Tokenizer::Kmer(t) => t.vocab(),
            Tokenizer::Bpe(t) => t.vocab(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab().len()
    }

    /// Short identifier recorded alongside results, e.g. `kmer6` or `bpe512`.
    pub fn id(&self) -> String {
        match self {
            Tokenizer::Kmer(t) if t.overlapping => format!("kmer{}", t.k),
            Tokenizer::Kmer(t) => format!("kmer{}s", t.k),
            Tokenizer::Bpe(t) => format!("bpe{}", t.vocab().len()),
        }
    }
}

/// Configuration-level tokenizer description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TokenizerSpec {
    Kmer {
        k: usize,
        #[serde(default = "default_true")]
        overlapping: bool,
    },
    Bpe {
        #[serde(default = "default_bpe_vocab")]
        vocab_size: usize,
    },
}

fn default_true() -> bool {
    true
}

fn default_bpe_vocab() -> usize {
    512
}

impl TokenizerSpec {
    /// Builds the tokenizer, training BPE on `corpus` when needed.
    pub fn build(&self, alphabet: Alphabet, corpus: &[Sequence]) -> Result<Tokenizer> {
        match *self {
            TokenizerSpec::Kmer { k, overlapping } => Ok(Tokenizer::Kmer(KmerTokenizer::new(k, overlapping, alphabet)?)),
            TokenizerSpec::Bpe { vocab_size } => Ok(Tokenizer::Bpe(BpeTokenizer::train(corpus, vocab_size)?)),
        }
    }
}

pub fn save_bpe(tok: &BpeTokenizer, path: &Path) -> Result<()> {
    fs::write(path, tok.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn load_bpe(path: &Path) -> Result<BpeTokenizer> {
    BpeTokenizer::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
