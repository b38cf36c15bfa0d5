#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqnas_core::autodiff::{gradient_check, param_gradient_check, Graph, NodeId, Tensor};
use seqnas_core::blocks::{build_block, BlockKind, BlockOptions, BlockSpec, ForwardCtx};
use seqnas_core::Result;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Entries bounded away from zero so kinks (relu) are not straddled by the probe.
pub fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>);

/// One finite-difference case per differentiable op.
pub fn op_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = &mut rng;
    let mut cases: Vec<Case> = vec![
        ("add (broadcast)", vec![rand_tensor(r, &[2, 3, 4]), rand_tensor(r, &[4])], Box::new(|g, x| g.add(x[0], x[1]))),
        ("sub (broadcast)", vec![rand_tensor(r, &[3]), rand_tensor(r, &[2, 3])], Box::new(|g, x| g.sub(x[0], x[1]))),
        ("mul (broadcast)", vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[3])], Box::new(|g, x| g.mul(x[0], x[1]))),
        ("scale", vec![rand_tensor(r, &[5])], Box::new(|g, x| Ok(g.scale(x[0], -2.5)))),
        ("matmul (shared rhs)", vec![rand_tensor(r, &[2, 3, 4]), rand_tensor(r, &[4, 5])], Box::new(|g, x| g.matmul(x[0], x[1]))),
        ("matmul (batched)", vec![rand_tensor(r, &[2, 3, 4]), rand_tensor(r, &[2, 4, 2])], Box::new(|g, x| g.matmul(x[0], x[1]))),
        ("relu", vec![rand_away_from_zero(r, &[3, 4])], Box::new(|g, x| Ok(g.relu(x[0])))),
        ("sigmoid", vec![rand_tensor(r, &[3, 4])], Box::new(|g, x| Ok(g.sigmoid(x[0])))),
        ("tanh", vec![rand_tensor(r, &[3, 4])], Box::new(|g, x| Ok(g.tanh(x[0])))),
        ("exp", vec![rand_tensor(r, &[3, 4])], Box::new(|g, x| Ok(g.exp(x[0])))),
        ("softplus", vec![rand_tensor(r, &[3, 4])], Box::new(|g, x| Ok(g.softplus(x[0])))),
        ("silu", vec![rand_tensor(r, &[3, 4])], Box::new(|g, x| Ok(g.silu(x[0])))),
        ("sin", vec![rand_tensor(r, &[3, 4])], Box::new(|g, x| Ok(g.sin(x[0])))),
        ("softmax", vec![rand_tensor(r, &[3, 5])], Box::new(|g, x| Ok(g.softmax(x[0])))),
        ("log_softmax", vec![rand_tensor(r, &[3, 5])], Box::new(|g, x| Ok(g.log_softmax(x[0])))),
        (
            "layer_norm",
            vec![rand_tensor(r, &[2, 3, 6]), rand_tensor(r, &[6]), rand_tensor(r, &[6])],
            Box::new(|g, x| g.layer_norm(x[0], x[1], x[2])),
        ),
        (
            "batch_norm (train)",
            vec![rand_tensor(r, &[2, 4, 3]), rand_tensor(r, &[3]), rand_tensor(r, &[3])],
            Box::new(|g, x| g.batch_norm(x[0], x[1], x[2], None)),
        ),
        (
            "batch_norm (eval)",
            vec![rand_tensor(r, &[2, 4, 3]), rand_tensor(r, &[3]), rand_tensor(r, &[3])],
            Box::new(|g, x| g.batch_norm(x[0], x[1], x[2], Some((&[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0])))),
        ),
        (
            "embedding",
            vec![rand_tensor(r, &[5, 3])],
            Box::new(|g, x| g.embedding(x[0], &[0, 4, 4, 2, 1, 0], &[2, 3])),
        ),
        (
            "cross_entropy (masked)",
            vec![rand_tensor(r, &[4, 6])],
            Box::new(|g, x| g.cross_entropy(x[0], &[Some(1), None, Some(5), Some(0)])),
        ),
        ("mean_pool", vec![rand_tensor(r, &[2, 5, 3])], Box::new(|g, x| g.mean_pool(x[0], 1))),
        ("reduce sum", vec![rand_tensor(r, &[2, 5, 3])], Box::new(|g, x| g.reduce(x[0], 2, false))),
        ("mean_all", vec![rand_tensor(r, &[2, 5])], Box::new(|g, x| Ok(g.mean_all(x[0])))),
        (
            "cosine_similarity",
            vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[3, 4])],
            Box::new(|g, x| g.cosine_similarity(x[0], x[1])),
        ),
        ("l2_normalize", vec![rand_tensor(r, &[3, 4])], Box::new(|g, x| Ok(g.l2_normalize(x[0])))),
        ("permute", vec![rand_tensor(r, &[2, 3, 4])], Box::new(|g, x| g.permute(x[0], &[2, 0, 1]))),
        ("transpose", vec![rand_tensor(r, &[2, 3, 4])], Box::new(|g, x| g.transpose(x[0]))),
        ("reshape", vec![rand_tensor(r, &[2, 6])], Box::new(|g, x| g.reshape(x[0], &[3, 4]))),
        ("slice", vec![rand_tensor(r, &[2, 5, 3])], Box::new(|g, x| g.slice(x[0], 1, 1, 3))),
        (
            "concat",
            vec![rand_tensor(r, &[2, 2, 3]), rand_tensor(r, &[2, 1, 3])],
            Box::new(|g, x| g.concat(&[x[0], x[1]], 1)),
        ),
        (
            "conv1d (same padding)",
            vec![rand_tensor(r, &[2, 7, 3]), rand_tensor(r, &[4, 3, 5]), rand_tensor(r, &[4])],
            Box::new(|g, x| g.conv1d(x[0], x[1], x[2], 2, 2)),
        ),
        (
            "conv1d (causal padding)",
            vec![rand_tensor(r, &[1, 6, 2]), rand_tensor(r, &[3, 2, 5]), rand_tensor(r, &[3])],
            Box::new(|g, x| g.conv1d(x[0], x[1], x[2], 4, 0)),
        ),
        (
            "long_conv (causal)",
            vec![rand_tensor(r, &[2, 6, 3]), rand_tensor(r, &[6, 3])],
            Box::new(|g, x| g.long_conv(x[0], x[1], true)),
        ),
        (
            "long_conv (bidirectional)",
            vec![rand_tensor(r, &[2, 5, 2]), rand_tensor(r, &[9, 2])],
            Box::new(|g, x| g.long_conv(x[0], x[1], false)),
        ),
        (
            "selective_scan",
            vec![
                rand_tensor(r, &[2, 5, 3]),
                Tensor::from_fn(&[2, 5, 3], |i| 0.1 + 0.05 * (i % 7) as f64),
                Tensor::from_fn(&[3, 4], |i| -0.5 - 0.1 * i as f64),
                rand_tensor(r, &[2, 5, 4]),
                rand_tensor(r, &[2, 5, 4]),
            ],
            Box::new(|g, x| g.selective_scan(x[0], x[1], x[2], x[3], x[4])),
        ),
    ];
    cases.push((
        "mse",
        vec![rand_tensor(r, &[3, 2]), rand_tensor(r, &[3, 2])],
        Box::new(|g, x| g.mse(x[0], x[1])),
    ));
    cases
}

/// Runs every op case, returning `(name, max relative error)`.
pub fn run_op_checks() -> Vec<(&'static str, f64)> {
    op_cases()
        .into_iter()
        .map(|(name, inputs, f)| {
            let err = gradient_check(&inputs, EPS, |g, x| f(g, x)).unwrap_or_else(|e| panic!("{name}: {e}"));
            (name, err)
        })
        .collect()
}

/// Block configurations for the gradient suite: every kind, with and
/// without projection, causal and bidirectional, train and eval.
pub fn block_cases() -> Vec<(BlockSpec, bool, bool)> {
    use BlockKind::*;
    let opts = BlockOptions { head_dim: 2, mamba_state: 3, hyena_filter_features: 2, hyena_filter_hidden: 4, ..Default::default() };
    let mut out = Vec::new();
    for kind in BlockKind::ALL {
        for (din, dout) in [(3, 4), (4, 4)] {
            for causal in [false, true] {
                let trains: &[bool] = if matches!(kind, Cnn | Lstm) { &[false, true] } else { &[false] };
                for &train in trains {
                    out.push((BlockSpec::new(kind, din, dout).with_options(opts), causal, train));
                }
            }
        }
    }
    out
}

pub fn run_block_check(spec: BlockSpec, causal: bool, train: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (block, mut params) = build_block(spec, &mut rng).unwrap();
    // Move batch-norm running statistics off their defaults so eval mode is exercised.
    for (name, t) in params.clone().iter() {
        if name.ends_with("running_var") {
            params.insert(name.clone(), Tensor::from_fn(t.shape(), |i| 0.5 + 0.25 * i as f64));
        }
    }
    let x = rand_tensor(&mut rng, &[2, 5, spec.key.dim_in]);
    param_gradient_check(&params, &x, EPS, |g, p, xi| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut ctx = ForwardCtx::new(train, causal, &mut rng);
        block.forward(g, p, xi, &mut ctx)
    })
    .unwrap_or_else(|e| panic!("{}: {e}", spec.key))
}

/// Random monotone paths over the reference widths.
pub fn random_paths(n: usize, seed: u64) -> Vec<seqnas_core::space::Path> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = [64usize, 128, 256, 512];
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    while out.len() < n {
        let depth = rng.random_range(3..=6);
        let types: Vec<BlockKind> = (0..depth).map(|_| BlockKind::ALL[rng.random_range(0..BlockKind::ALL.len())]).collect();
        let mut dims: Vec<usize> = (0..depth).map(|_| widths[rng.random_range(0..widths.len())]).collect();
        dims.sort_unstable();
        let key = format!("{types:?}{dims:?}");
        if seen.insert(key) {
            out.push(seqnas_core::space::Path::new(format!("p{:04}", out.len()), types, dims).unwrap());
        }
    }
    out
}

/// Trains the surrogate on a table planted from per-task linear models over
/// mean node features and returns the worst held-out within-task Spearman.
pub fn planted_linear_spearman(seed: u64) -> f64 {
    use seqnas_core::eval::spearman;
    use seqnas_core::predictor::*;
    use std::collections::BTreeMap;

    let paths = random_paths(320, seed);
    let bounds = DimBounds::new(64, 512).unwrap();
    let encodings: BTreeMap<String, ArchEncoding> =
        paths.iter().map(|p| (p.path_id.clone(), encode_arch(p, 64, bounds).unwrap())).collect();
    let descriptions = ["promoter detection in human genomic windows", "protein stability regression from mutants"];
    let embeddings: BTreeMap<u32, Vec<f64>> =
        descriptions.iter().enumerate().map(|(i, d)| (i as u32, embed_text(d).unwrap())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights: Vec<Vec<f64>> =
        (0..descriptions.len()).map(|_| (0..NODE_FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let truth = |enc: &ArchEncoding, t: usize| -> f64 {
        let n = enc.nodes() as f64;
        enc.features.iter().flat_map(|row| row.iter().zip(&weights[t]).map(|(x, w)| x * w)).sum::<f64>() / n
    };
    let held_out = paths.len() / 5;
    let (test, train) = paths.split_at(held_out);
    let mut samples = Vec::new();
    for t in 0..descriptions.len() {
        let ys: Vec<f64> = train.iter().map(|p| truth(&encodings[&p.path_id], t)).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let std = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64).sqrt();
        for (p, y) in train.iter().zip(ys) {
            samples.push(Sample { path_id: p.path_id.clone(), task_id: t as u32, target: (y - mean) / std });
        }
    }
    let cfg = PredictorConfig { seed, ..Default::default() };
    let (model, _) = Predictor::train(&samples, &encodings, &embeddings, cfg).unwrap();
    let encs: Vec<&ArchEncoding> = test.iter().map(|p| &encodings[&p.path_id]).collect();
    (0..descriptions.len())
        .map(|t| {
            let pred = model.predict(&encs, &embeddings[&(t as u32)]).unwrap();
            let want: Vec<f64> = encs.iter().map(|e| truth(e, t)).collect();
            spearman(&pred, &want).unwrap()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Compares `prediction_metrics` with a brute-force count on random cases;
/// returns the number of mismatches.
pub fn metrics_oracle_mismatches(cases: usize, seed: u64) -> usize {
    use seqnas_core::predictor::prediction_metrics;
    use std::collections::BTreeSet;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    let mut done = 0;
    while done < cases {
        let universe = rng.random_range(2..40);
        let ids: Vec<String> = (0..universe).map(|i| format!("a{i}")).collect();
        let mut pred = ids.clone();
        pred.shuffle(&mut rng);
        pred.truncate(rng.random_range(1..=universe));
        let truth: BTreeSet<String> = ids.iter().filter(|_| rng.random_bool(0.3)).cloned().collect();
        if truth.is_empty() {
            continue;
        }
        let k = rng.random_range(1..=pred.len());
        let mut inter = 0usize;
        for p in &pred[..k] {
            for g in &truth {
                if p == g {
                    inter += 1;
                }
            }
        }
        let m = prediction_metrics(&pred, &truth, k).unwrap();
        let ok = m.precision == inter as f64 / k as f64
            && m.recall == inter as f64 / truth.len() as f64
            && m.hit_rate == if inter > 0 { 1.0 } else { 0.0 };
        bad += usize::from(!ok);
        done += 1;
    }
    bad
}

fn random_dna(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len).map(|_| b"ACGT"[rng.random_range(0..4)] as char).collect()
}

/// Random (L, k, stride) cases whose k-mer token count disagrees with
/// L-k+1 (overlapping) or floor(L/k) (non-overlapping).
pub fn kmer_count_mismatches(cases: usize, seed: u64) -> usize {
    use seqnas_core::{Alphabet, KmerTokenizer, Sequence};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let k = rng.random_range(1..=6);
        let len = rng.random_range(k..k + 60);
        let overlapping = rng.random_bool(0.5);
        let seq = Sequence::new(&random_dna(&mut rng, len), Alphabet::Dna).unwrap();
        let got = KmerTokenizer::new(k, overlapping, Alphabet::Dna).unwrap().encode(&seq).unwrap().len();
        let want = if overlapping { len - k + 1 } else { len / k };
        bad += usize::from(got != want);
    }
    bad
}

/// Random sequences that do not decode back to themselves after encoding
/// with a tokenizer trained on a separate random corpus.
pub fn bpe_roundtrip_failures(cases: usize, seed: u64) -> usize {
    use seqnas_core::{Alphabet, BpeTokenizer, Sequence};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus: Vec<Sequence> = (0..50).map(|_| {
        let len = rng.random_range(20..80);
        Sequence::new(&random_dna(&mut rng, len), Alphabet::Dna).unwrap()
    }).collect();
    let tok = BpeTokenizer::train(&corpus, 64).unwrap();
    (0..cases)
        .filter(|_| {
            let len = rng.random_range(1..120);
            let s = random_dna(&mut rng, len);
            tok.decode(&tok.encode(&Sequence::new(&s, Alphabet::Dna).unwrap())) != s
        })
        .count()
}

/// Merge list learned on a two-sequence corpus, worked out by hand:
/// AC occurs 3 times; then (AC,G) and (G,T) tie at 2 and the
/// lexicographically smaller wins; then (ACG,T) occurs twice; nothing repeats after.
pub fn bpe_toy_merges_match() -> bool {
    use seqnas_core::{Alphabet, BpeTokenizer, Sequence};
    let corpus = [Sequence::new("ACACGT", Alphabet::Dna).unwrap(), Sequence::new("ACGT", Alphabet::Dna).unwrap()];
    let want = [("A", "C"), ("AC", "G"), ("ACG", "T")];
    let got = BpeTokenizer::train(&corpus, 20).unwrap();
    got.merges().iter().map(|(a, b)| (a.as_str(), b.as_str())).eq(want.iter().copied())
}

/// Composes a tiny space and checks it against brute-force enumeration and
/// an independent greedy filter. Returns a description of the first problem.
pub fn tiny_space_problems() -> Option<String> {
    use seqnas_core::space::{compose_space, SpaceConfig};
    let cfg = SpaceConfig {
        depths: vec![2, 3],
        targets: vec![4, 6],
        widths: vec![32, 64, 128],
        modules: vec![BlockKind::Cnn, BlockKind::Transformer],
        h0: 32,
        tau: 0.5,
        seed: 3,
        block_options: BlockOptions::default(),
    };
    let paths = compose_space(&cfg).ok()?;
    for (&d, &k) in cfg.depths.iter().zip(&cfg.targets) {
        // Every width tuple, then monotone ones, then greedy in sorted order.
        let mut all: Vec<Vec<usize>> = vec![vec![]];
        for _ in 0..d {
            all = all.into_iter().flat_map(|t| cfg.widths.iter().map(move |&w| [t.clone(), vec![w]].concat())).collect();
        }
        let mut mono: Vec<Vec<usize>> =
            all.into_iter().filter(|t| t[0] >= cfg.h0 && t.windows(2).all(|w| w[0] <= w[1])).collect();
        mono.sort();
        let dist = |a: &[usize], b: &[usize]| {
            a.iter().zip(b).map(|(x, y)| ((*x as f64).log2() - (*y as f64).log2()).powi(2)).sum::<f64>().sqrt()
        };
        let mut kept: Vec<Vec<usize>> = Vec::new();
        for t in mono {
            if kept.iter().all(|s| dist(s, &t) >= cfg.tau) {
                kept.push(t);
            }
        }
        let at_d: Vec<_> = paths.iter().filter(|p| p.depth == d).collect();
        if at_d.len() != k {
            return Some(format!("depth {d}: {} paths, want {k}", at_d.len()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in at_d {
            if !kept.contains(&p.dims) {
                return Some(format!("{} has pruned or non-monotone widths {:?}", p.path_id, p.dims));
            }
            if p.types.iter().any(|t| !cfg.modules.contains(t)) {
                return Some(format!("{} uses an unconfigured module", p.path_id));
            }
            if !seen.insert((p.types.clone(), p.dims.clone())) {
                return Some(format!("{} duplicates another path", p.path_id));
            }
        }
    }
    None
}
