//! Fixtures shared by the benchmarks.

use seqnas_core::blocks::{BlockKind, BlockOptions};
use seqnas_core::data::{gen_motif_task, repeating_corpus};
use seqnas_core::eval::{PerfRecord, Protocol};
use seqnas_core::space::Path;
use seqnas_core::supernet::{build_registry, BlockRegistry, SupernetConfig};
use seqnas_core::{Alphabet, KmerTokenizer, MetricKind, Problem, Sequence, TaskSpec};

pub fn small_options() -> BlockOptions {
    BlockOptions { head_dim: 8, mamba_state: 4, hyena_filter_features: 4, hyena_filter_hidden: 8, ..Default::default() }
}

/// One single-block path per kind at width 32.
pub fn single_block_paths() -> Vec<Path> {
    BlockKind::ALL.iter().map(|&k| Path::new(format!("{k}"), vec![k], vec![32]).unwrap()).collect()
}

/// Token rows of a repeating DNA corpus plus the vocabulary size.
pub fn token_corpus(n: usize, len: usize) -> (Vec<Vec<usize>>, usize) {
    let tok = KmerTokenizer::new(1, true, Alphabet::Dna).unwrap();
    let seqs = repeating_corpus("ACGTTGCA", n, len, Alphabet::Dna).unwrap();
    (seqs.iter().map(|s| tok.encode(s).unwrap()).collect(), tok.vocab().len())
}

pub fn registry(paths: &[Path], vocab: usize) -> BlockRegistry {
    let cfg = SupernetConfig::for_paths(paths, 16, vocab).with_options(small_options());
    build_registry(paths, cfg, 0).unwrap()
}

pub fn motif_sequences(n: usize, len: usize) -> Vec<Sequence> {
    let (_, ds) = gen_motif_task(0, n, len, "TATAAT", 0.1).unwrap();
    ds.items.into_iter().map(|(s, _)| s).collect()
}

/// Deterministic pseudo-random records over `archs` x `tasks`.
pub fn records(archs: usize, tasks: usize) -> (Vec<PerfRecord>, Vec<TaskSpec>) {
    let specs: Vec<TaskSpec> = (0..tasks as u32)
        .map(|t| TaskSpec::new(t, format!("task {t}"), Alphabet::Dna, Problem::Binary, MetricKind::Accuracy).unwrap())
        .collect();
    let mut recs = Vec::with_capacity(archs * tasks);
    for a in 0..archs {
        for t in 0..tasks as u32 {
            let v = ((a * 7919 + t as usize * 104_729) % 1000) as f64 / 1000.0;
            recs.push(PerfRecord {
                path_id: format!("a{a:04}"),
                task_id: t,
                protocol: Protocol::OnlyFt,
                tokenizer_id: "kmer1".into(),
                metric_value: v,
                seed: 0,
            });
        }
    }
    (recs, specs)
}
