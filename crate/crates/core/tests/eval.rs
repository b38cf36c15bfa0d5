use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqnas_core::blocks::{BlockKind, BlockOptions};
use seqnas_core::data::{gen_gc_task, gen_motif_task, Alphabet, MetricKind, Problem, TaskSpec};
use seqnas_core::eval::*;
use seqnas_core::space::Path;
use seqnas_core::supernet::{build_registry, SupernetConfig};
use seqnas_core::tokenize::{KmerTokenizer, Tokenizer};
use seqnas_core::Error;

fn task(id: u32, metric: MetricKind) -> TaskSpec {
    let problem = if metric == MetricKind::Rmse { Problem::Regression } else { Problem::Binary };
    TaskSpec::new(id, format!("task {id}"), Alphabet::Dna, problem, metric).unwrap()
}

fn rec(path: &str, task: u32, v: f64) -> PerfRecord {
    PerfRecord {
        path_id: path.into(),
        task_id: task,
        protocol: Protocol::OnlyFt,
        tokenizer_id: "kmer1".into(),
        metric_value: v,
        seed: 0,
    }
}

#[test]
fn metric_examples() {
    let y = [1.0, 0.0, 1.0, 0.0];
    assert_eq!(accuracy(&y, &y).unwrap(), 1.0);
    assert_eq!(mcc(&y, &y).unwrap(), 1.0);
    let labels = [1.0, 2.0, 4.0];
    assert!((rmse(&[1.5, 2.5, 4.5], &labels).unwrap() - 0.5).abs() < 1e-12);
    // TP = TN = FP = FN = 1.
    assert_eq!(mcc(&[1.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 0.0, 1.0]).unwrap(), 0.0);
    assert_eq!(mcc(&[1.0, 1.0, 1.0], &[1.0, 0.0, 1.0]).unwrap(), 0.0);
    assert!(matches!(accuracy(&[1.0], &[1.0, 0.0]), Err(Error::LengthMismatch(1, 2))));
    assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
}

#[test]
fn binary_mcc_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.random_range(2..40);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        let l: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        let count = |a: f64, b: f64| p.iter().zip(&l).filter(|(x, y)| **x == a && **y == b).count() as f64;
        let (tp, tn, fp, fn_) = (count(1.0, 1.0), count(0.0, 0.0), count(1.0, 0.0), count(0.0, 1.0));
        let d = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
        let expected = if d == 0.0 { 0.0 } else { (tp * tn - fp * fn_) / d };
        assert!((mcc(&p, &l).unwrap() - expected).abs() < 1e-12);
    }
}

#[test]
fn spearman_rho_checks_ids() {
    let a: BTreeMap<String, f64> = [("x".into(), 1.0), ("y".into(), 2.0)].into();
    let b: BTreeMap<String, f64> = [("x".into(), 1.0), ("z".into(), 2.0)].into();
    assert!(matches!(spearman_rho(&a, &b), Err(Error::MismatchedIds)));
    assert_eq!(spearman_rho(&a, &a).unwrap(), 1.0);
}

#[test]
fn hand_computed_rank_fixture() {
    let tasks = [task(1, MetricKind::Accuracy), task(2, MetricKind::Rmse)];
    let recs = vec![
        rec("a1", 1, 0.9),
        rec("a2", 1, 0.8),
        rec("a3", 1, 0.7),
        rec("a1", 2, 1.0),
        rec("a2", 2, 2.0),
        rec("a3", 2, 3.0),
    ];
    let t = zscore_rank(&recs, &tasks).unwrap();
    let z = 1.5f64.sqrt();
    assert!((t.scores["a1"] - z).abs() < 1e-9);
    assert!(t.scores["a2"].abs() < 1e-9);
    assert!((t.scores["a3"] + z).abs() < 1e-9);
    assert_eq!(t.order, vec!["a1", "a2", "a3"]);
    assert!((t.tasks[0].std - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
}

#[test]
fn symmetric_table_ties_and_constant_task_contributes_nothing() {
    let tasks = [task(1, MetricKind::Accuracy), task(2, MetricKind::Accuracy), task(3, MetricKind::Accuracy)];
    let recs = vec![rec("a", 1, 1.0), rec("b", 1, 0.0), rec("a", 2, 0.0), rec("b", 2, 1.0), rec("a", 3, 0.5), rec("b", 3, 0.5)];
    let t = zscore_rank(&recs, &tasks).unwrap();
    assert_eq!(t.scores["a"], t.scores["b"]);
    assert_eq!(t.order, vec!["a", "b"]);
}

#[test]
fn missing_pairs_are_named() {
    let tasks = [task(1, MetricKind::Accuracy), task(2, MetricKind::Accuracy)];
    let recs = vec![rec("a", 1, 1.0), rec("b", 1, 0.0), rec("a", 2, 0.0)];
    match zscore_rank(&recs, &tasks) {
        Err(Error::MissingPairs(p)) => assert_eq!(p, vec![("b".to_string(), 2)]),
        other => panic!("{other:?}"),
    }
}

fn random_records(rng: &mut ChaCha8Rng, archs: usize, tasks: &[TaskSpec]) -> Vec<PerfRecord> {
    let mut out = Vec::new();
    for a in 0..archs {
        for t in tasks {
            out.push(rec(&format!("a{a:02}"), t.task_id, rng.random_range(0.0..1.0)));
        }
    }
    out
}

proptest! {
    #[test]
    fn affine_transform_keeps_order(seed in 0u64..1000, alpha in 0.01f64..50.0, beta in -10.0f64..10.0, which in 0usize..3) {
        let tasks = [task(0, MetricKind::Accuracy), task(1, MetricKind::Rmse), task(2, MetricKind::Mcc)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs = random_records(&mut rng, 7, &tasks);
        let moved: Vec<PerfRecord> = recs
            .iter()
            .map(|r| {
                let mut r = r.clone();
                if r.task_id == which as u32 {
                    r.metric_value = alpha * r.metric_value + beta;
                }
                r
            })
            .collect();
        let a = zscore_rank(&recs, &tasks).unwrap();
        let b = zscore_rank(&moved, &tasks).unwrap();
        prop_assert_eq!(a.order, b.order);
    }

    #[test]
    fn flipping_metric_and_direction_is_bit_identical(seed in 0u64..1000) {
        let tasks = [task(0, MetricKind::Accuracy), task(1, MetricKind::Rmse)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs = random_records(&mut rng, 6, &tasks);
        let flipped_tasks: Vec<TaskSpec> = tasks
            .iter()
            .map(|t| TaskSpec { direction: -t.direction, ..t.clone() })
            .collect();
        let flipped: Vec<PerfRecord> = recs.iter().map(|r| PerfRecord { metric_value: -r.metric_value, ..r.clone() }).collect();
        let a = zscore_rank(&recs, &tasks).unwrap();
        let b = zscore_rank(&flipped, &flipped_tasks).unwrap();
        for (x, y) in a.scores.values().zip(b.scores.values()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn top_k_matches_sort(seed in 0u64..1000, k in 1usize..9) {
        let tasks = [task(0, MetricKind::Accuracy), task(1, MetricKind::Rmse)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs = random_records(&mut rng, 9, &tasks);
        let t = zscore_rank(&recs, &tasks).unwrap();
        let mut brute: Vec<(String, f64)> = t.scores.iter().map(|(a, s)| (a.clone(), *s)).collect();
        brute.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
        let expect: Vec<String> = brute.into_iter().take(k).map(|x| x.0).collect();
        prop_assert_eq!(select_top_k(&t, k).unwrap(), expect);
    }

    #[test]
    fn single_task_ranking_is_raw_order(seed in 0u64..1000) {
        let tasks = [task(0, MetricKind::Accuracy)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs = random_records(&mut rng, 8, &tasks);
        let t = zscore_rank(&recs, &tasks).unwrap();
        let mut raw: Vec<&PerfRecord> = recs.iter().collect();
        raw.sort_by(|a, b| b.metric_value.partial_cmp(&a.metric_value).unwrap());
        let expect: Vec<String> = raw.iter().map(|r| r.path_id.clone()).collect();
        prop_assert_eq!(t.order, expect);
    }
}

#[test]
fn mean_architecture_scores_zero() {
    let tasks = [task(0, MetricKind::Accuracy), task(1, MetricKind::Rmse)];
    let recs = vec![rec("lo", 0, 0.2), rec("mid", 0, 0.5), rec("hi", 0, 0.8), rec("lo", 1, 3.0), rec("mid", 1, 2.0), rec("hi", 1, 1.0)];
    assert_eq!(zscore_rank(&recs, &tasks).unwrap().scores["mid"], 0.0);
}

fn small_config(vocab: usize) -> SupernetConfig {
    let opts = BlockOptions { head_dim: 8, mamba_state: 4, hyena_filter_features: 4, hyena_filter_hidden: 8, ..Default::default() };
    SupernetConfig { h0: 16, h_ref: 32, vocab_size: vocab, max_len: 256, options: opts }
}

fn kmer1() -> Tokenizer {
    Tokenizer::Kmer(KmerTokenizer::new(1, true, Alphabet::Dna).unwrap())
}

#[test]
fn two_block_cnn_separates_a_clean_motif() {
    let (spec, data) = gen_motif_task(7, 1000, 40, "TATAAT", 0.0).unwrap();
    // Counting motif occurrences separates the classes perfectly.
    let present: Vec<f64> = data.items.iter().map(|(s, _)| f64::from(u8::from(s.residues().contains("TATAAT")))).collect();
    let labels: Vec<f64> = data.items.iter().map(|(_, y)| *y).collect();
    assert_eq!(accuracy(&present, &labels).unwrap(), 1.0);
    let tok = kmer1();
    let cfg = small_config(tok.vocab_size());
    let path = Path::new("cnn2", vec![BlockKind::Cnn, BlockKind::Cnn], vec![32, 32]).unwrap();
    let ft = FinetuneConfig { lr: 3e-3, batch_size: 32, epochs: 15, warmup_steps: 10, weight_decay: 0.01, seed: 1 };
    let out = finetune(&path, Protocol::OnlyFt, WeightSource::Scratch(&cfg), &spec, &data, &tok, &ft).unwrap();
    assert!(out.record.metric_value >= 0.95, "{out:?}");
    let again = finetune(&path, Protocol::OnlyFt, WeightSource::Scratch(&cfg), &spec, &data, &tok, &ft).unwrap();
    assert_eq!(out, again);
}

#[test]
fn scratch_protocol_ignores_the_checkpoint() {
    let (spec, data) = gen_gc_task(3, 60, 24).unwrap();
    let tok = kmer1();
    let cfg = small_config(tok.vocab_size());
    let path = Path::new("p", vec![BlockKind::Lstm], vec![16]).unwrap();
    let ft = FinetuneConfig { epochs: 2, batch_size: 16, ..Default::default() };
    let a = build_registry(std::slice::from_ref(&path), cfg, 1).unwrap();
    let b = build_registry(std::slice::from_ref(&path), cfg, 99).unwrap();
    let ra = finetune(&path, Protocol::OnlyFt, WeightSource::Inherit(&a), &spec, &data, &tok, &ft).unwrap();
    let rb = finetune(&path, Protocol::OnlyFt, WeightSource::Inherit(&b), &spec, &data, &tok, &ft).unwrap();
    let rs = finetune(&path, Protocol::OnlyFt, WeightSource::Scratch(&cfg), &spec, &data, &tok, &ft).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ra, rs);
    let ia = finetune(&path, Protocol::MaskFt, WeightSource::Inherit(&a), &spec, &data, &tok, &ft).unwrap();
    let ib = finetune(&path, Protocol::MaskFt, WeightSource::Inherit(&b), &spec, &data, &tok, &ft).unwrap();
    assert_ne!(ia.train_losses, ib.train_losses);
    let err = finetune(&path, Protocol::MaskFt, WeightSource::Scratch(&cfg), &spec, &data, &tok, &ft).unwrap_err();
    assert!(matches!(err, Error::MissingCheckpoint(_)), "{err}");
}

#[test]
fn foundation_flow_tags_records() {
    use seqnas_core::supernet::{PretrainConfig, SslObjective};
    let tok = kmer1();
    let cfg = small_config(tok.vocab_size());
    let path = Path::new("top", vec![BlockKind::Cnn], vec![16]).unwrap();
    let tasks = vec![gen_motif_task(1, 80, 24, "ACGT", 0.0).unwrap(), gen_gc_task(2, 60, 24).unwrap()];
    let corpus: Vec<Vec<usize>> = tasks.iter().flat_map(|(_, d)| d.items.iter().map(|(s, _)| tok.encode(s).unwrap())).collect();
    let mut pc = PretrainConfig::new(SslObjective::mm(), 20);
    pc.batch_size = 8;
    let ft = FinetuneConfig { epochs: 2, batch_size: 16, ..Default::default() };
    let recs = foundation_flow(&path, &cfg, &corpus, &pc, &tasks, &tok, &ft).unwrap();
    assert_eq!(recs.len(), 2);
    assert!(recs.iter().all(|r| r.protocol == Protocol::Foundation && r.metric_value.is_finite()));
    assert_eq!(recs, foundation_flow(&path, &cfg, &corpus, &pc, &tasks, &tok, &ft).unwrap());
}
