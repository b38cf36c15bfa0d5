mod common;

use std::collections::{BTreeMap, BTreeSet};

use seqnas_core::blocks::BlockKind;
use seqnas_core::data::{Alphabet, MetricKind, Problem, TaskSpec};
use seqnas_core::eval::{PerfRecord, Protocol};
use seqnas_core::predictor::*;
use seqnas_core::space::Path;
use seqnas_core::Error;

fn ids(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn encoding_invariants() {
    let bounds = DimBounds::new(64, 512).unwrap();
    for p in common::random_paths(50, 3) {
        let e = encode_arch(&p, 64, bounds).unwrap();
        for (i, row) in e.adjacency.iter().enumerate() {
            for (j, &a) in row.iter().enumerate() {
                assert_eq!(a, u8::from(j == i + 1));
            }
        }
        for row in &e.features {
            assert_eq!(row[..BlockKind::ALL.len()].iter().filter(|&&x| x == 1.0).count(), 1);
            assert!(row[BlockKind::ALL.len()..].iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
    let single = Path::new("s", vec![BlockKind::Mamba], vec![64]).unwrap();
    let e = encode_arch(&single, 64, bounds).unwrap();
    assert_eq!(e.adjacency, vec![vec![0]]);
    assert_eq!(&e.features[0][5..], &[0.0, 0.0]);
    assert!(DimBounds::new(64, 64).is_err());
    assert!(encode_arch(&single, 64, DimBounds { min: 64, max: 64 }).is_err());
}

#[test]
fn text_embedding_properties() {
    let a = embed_text("Promoter detection in Human").unwrap();
    let b = embed_text("promoter DETECTION in human").unwrap();
    assert_eq!(a, b);
    assert!((cosine(&a, &b) - 1.0).abs() < 1e-12);
    for t in ["x", "enhancer activity prediction", "the the the"] {
        let v = embed_text(t).unwrap();
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let left = ["splice", "site"];
    let right = ["protein", "fold"];
    let lb: BTreeSet<usize> = left.iter().map(|w| word_bucket(w)).collect();
    let rb: BTreeSet<usize> = right.iter().map(|w| word_bucket(w)).collect();
    assert!(lb.is_disjoint(&rb), "fixture words collide");
    assert_eq!(cosine(&embed_text(&left.join(" ")).unwrap(), &embed_text(&right.join(" ")).unwrap()), 0.0);
    assert!(embed_text("  ,. ").is_err());
}

#[test]
fn metric_examples() {
    let g: BTreeSet<String> = ids(&["a", "x", "y", "z", "w"]).into_iter().collect();
    let m = prediction_metrics(&ids(&["a", "b", "c"]), &g, 3).unwrap();
    assert_eq!(m, PredictionMetrics { precision: 1.0 / 3.0, recall: 1.0 / 5.0, hit_rate: 1.0 });
    let m = prediction_metrics(&ids(&["b", "c"]), &g, 2).unwrap();
    assert_eq!(m, PredictionMetrics { precision: 0.0, recall: 0.0, hit_rate: 0.0 });
    let m = prediction_metrics(&ids(&["x", "y"]), &g, 2).unwrap();
    assert_eq!(m.precision, 1.0);
    assert!(prediction_metrics(&ids(&["a"]), &BTreeSet::new(), 1).is_err());
    assert!(matches!(prediction_metrics(&ids(&["a"]), &g, 2), Err(Error::TooFew { .. })));
}

#[test]
fn metrics_agree_with_brute_force() {
    assert_eq!(common::metrics_oracle_mismatches(100, 11), 0);
}

#[test]
fn hit_rate_monotone_in_k() {
    let g: BTreeSet<String> = ids(&["d", "q"]).into_iter().collect();
    let pred = ids(&["a", "b", "c", "d", "e"]);
    let mut prev = 0.0;
    for k in 1..=5 {
        let m = prediction_metrics(&pred, &g, k).unwrap();
        assert!(m.hit_rate >= prev);
        prev = m.hit_rate;
        assert_eq!(m.precision * k as f64, m.recall * g.len() as f64);
    }
}

#[test]
fn top_k_order_and_ties() {
    let scores = vec![("c".to_string(), 0.5), ("a".to_string(), 0.5), ("b".to_string(), 0.9), ("d".to_string(), 0.5)];
    assert_eq!(top_k_by_score(scores.clone(), 1).unwrap(), ids(&["b"]));
    assert_eq!(top_k_by_score(scores.clone(), 4).unwrap(), ids(&["b", "a", "c", "d"]));
    assert!(matches!(top_k_by_score(scores, 5), Err(Error::TooFew { .. })));
}

#[test]
fn predict_topk_matches_sorted_outputs() {
    let paths = common::random_paths(40, 5);
    let bounds = DimBounds::new(64, 512).unwrap();
    let encodings: BTreeMap<String, ArchEncoding> =
        paths.iter().map(|p| (p.path_id.clone(), encode_arch(p, 64, bounds).unwrap())).collect();
    let model = Predictor::new(PredictorConfig::default());
    let task = embed_text("enhancer activity").unwrap();
    let encs: Vec<&ArchEncoding> = paths.iter().map(|p| &encodings[&p.path_id]).collect();
    let preds = model.predict(&encs, &task).unwrap();
    let mut order: Vec<usize> = (0..paths.len()).collect();
    order.sort_by(|&a, &b| preds[b].partial_cmp(&preds[a]).unwrap().then(paths[a].path_id.cmp(&paths[b].path_id)));
    let want: Vec<String> = order.iter().take(7).map(|&i| paths[i].path_id.clone()).collect();
    assert_eq!(predict_topk(&model, &paths, &encodings, &task, 7).unwrap(), want);
    // One at a time agrees with the batched pass.
    let single = model.predict(&encs[..1], &task).unwrap();
    assert!((single[0] - preds[0]).abs() < 1e-12);
    assert!(predict_topk(&model, &paths, &encodings, &task, 41).is_err());
}

#[test]
fn planted_linear_table_is_recovered() {
    let rho = common::planted_linear_spearman(0);
    assert!(rho >= 0.8, "held-out spearman {rho}");
}

fn task(id: u32, metric: MetricKind) -> TaskSpec {
    let problem = if metric == MetricKind::Rmse { Problem::Regression } else { Problem::Binary };
    TaskSpec::new(id, format!("synthetic task {id}"), Alphabet::Dna, problem, metric).unwrap()
}

fn record(path: &str, t: u32, v: f64) -> PerfRecord {
    PerfRecord {
        path_id: path.into(),
        task_id: t,
        protocol: Protocol::OnlyFt,
        tokenizer_id: "k1".into(),
        metric_value: v,
        seed: 0,
    }
}

#[test]
fn samples_are_direction_aligned_zscores() {
    let tasks = [task(0, MetricKind::Accuracy), task(1, MetricKind::Rmse)];
    let recs = vec![record("a", 0, 0.9), record("b", 0, 0.7), record("a", 1, 2.0), record("b", 1, 1.0)];
    let s = zscore_samples(&recs, &tasks);
    let get = |p: &str, t: u32| s.iter().find(|x| x.path_id == p && x.task_id == t).unwrap().target;
    assert!((get("a", 0) - 1.0).abs() < 1e-12);
    assert!((get("b", 0) + 1.0).abs() < 1e-12);
    assert!((get("a", 1) + 1.0).abs() < 1e-12);
    assert!((get("b", 1) - 1.0).abs() < 1e-12);
}

#[test]
fn ground_truth_fraction_and_direction() {
    let t = task(1, MetricKind::Rmse);
    let recs: Vec<PerfRecord> = (0..25).map(|i| record(&format!("p{i:02}"), 1, f64::from(i))).collect();
    let g = ground_truth(&recs, &t, 0.1).unwrap();
    assert_eq!(g, ids(&["p00", "p01", "p02"]).into_iter().collect());
    let g = ground_truth(&recs[..3], &t, 0.1).unwrap();
    assert_eq!(g.len(), 1);
    assert!(ground_truth(&recs, &task(4, MetricKind::Mcc), 0.1).is_err());
}

#[test]
fn training_is_seeded_and_resumable_from_disk() {
    let paths = common::random_paths(30, 9);
    let bounds = DimBounds::new(64, 512).unwrap();
    let encodings: BTreeMap<String, ArchEncoding> =
        paths.iter().map(|p| (p.path_id.clone(), encode_arch(p, 64, bounds).unwrap())).collect();
    let embeddings = BTreeMap::from([(0u32, embed_text("a task").unwrap())]);
    let samples: Vec<Sample> =
        paths.iter().enumerate().map(|(i, p)| Sample { path_id: p.path_id.clone(), task_id: 0, target: i as f64 / 30.0 }).collect();
    let cfg = PredictorConfig { epochs: 30, ..Default::default() };
    let (a, losses) = Predictor::train(&samples, &encodings, &embeddings, cfg).unwrap();
    let (b, _) = Predictor::train(&samples, &encodings, &embeddings, cfg).unwrap();
    assert_eq!(a, b);
    let head: f64 = losses[..5].iter().sum();
    let tail: f64 = losses[losses.len() - 5..].iter().sum();
    assert!(tail < head, "{losses:?}");

    let mut rev = samples.clone();
    rev.reverse();
    let (c, _) = Predictor::train(&rev, &encodings, &embeddings, cfg).unwrap();
    let encs: Vec<&ArchEncoding> = paths.iter().map(|p| &encodings[&p.path_id]).collect();
    let pa = a.predict(&encs, &embeddings[&0]).unwrap();
    let pc = c.predict(&encs, &embeddings[&0]).unwrap();
    assert!(seqnas_core::eval::spearman(&pa, &pc).unwrap() > 0.9);

    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("predictor");
    a.save(&stem).unwrap();
    assert_eq!(Predictor::load(&stem).unwrap(), a);
    assert!(matches!(Predictor::load(&dir.path().join("none")), Err(Error::MissingCheckpoint(_))));
    assert!(matches!(Predictor::train(&[], &encodings, &embeddings, cfg), Err(Error::EmptyDataset)));
}

#[test]
fn split_presets() {
    let s = TaskSplit::preset("supervised").unwrap();
    assert_eq!(s.test, vec![2, 3, 6, 10, 15, 17]);
    let t = TaskSplit::preset("transfer").unwrap();
    assert_eq!(t.train, vec![5, 6, 7, 8, 9, 10, 12, 13, 14]);
    assert!(t.train.iter().all(|x| !t.test.contains(x)));
    assert!(TaskSplit::preset("other").is_err());
}
