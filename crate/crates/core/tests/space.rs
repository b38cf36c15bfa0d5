mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqnas_core::blocks::{BlockKind, BlockOptions};
use seqnas_core::space::*;

fn brute_monotone(widths: &[usize], h0: usize, d: usize) -> Vec<Vec<usize>> {
    let mut all: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..d {
        all = all.into_iter().flat_map(|t| widths.iter().map(move |&w| [t.clone(), vec![w]].concat())).collect();
    }
    let mut out: Vec<Vec<usize>> = all.into_iter().filter(|t| t[0] >= h0 && t.windows(2).all(|w| w[0] <= w[1])).collect();
    out.sort();
    out
}

#[test]
fn dim_enumeration_matches_brute_force() {
    let h = [64, 128, 256, 512];
    let mut got = enum_dim_paths(&h, 64, 3);
    got.sort();
    assert_eq!(got.len(), 20);
    assert_eq!(got, brute_monotone(&h, 64, 3));
    for d in 1..=5 {
        assert_eq!(enum_dim_paths(&[32, 64, 128], 64, d).len(), brute_monotone(&[32, 64, 128], 64, d).len());
    }
}

#[test]
fn log_distance_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = [16, 32, 64, 128, 256];
    for _ in 0..200 {
        let d = rng.random_range(1..6);
        let a: Vec<usize> = (0..d).map(|_| w[rng.random_range(0..5)]).collect();
        let b: Vec<usize> = (0..d).map(|_| w[rng.random_range(0..5)]).collect();
        assert_eq!(log_distance(&a, &b, 16).unwrap(), log_distance(&b, &a, 16).unwrap());
    }
    assert!(log_distance(&[64], &[64, 64], 64).is_err());
}

#[test]
fn greedy_kept_set_is_pairwise_separated() {
    let all = enum_dim_paths(&[64, 128, 256], 64, 2);
    let kept = greedy_select(&all, 1.0, 64).unwrap();
    for (i, a) in kept.iter().enumerate() {
        for b in &kept[i + 1..] {
            assert!(log_distance(a, b, 64).unwrap() >= 1.0);
        }
    }
    // Every dropped tuple is within tau of something kept.
    for t in all.iter().filter(|t| !kept.contains(t)) {
        assert!(kept.iter().any(|k| log_distance(k, t, 64).unwrap() < 1.0));
    }
}

#[test]
fn kmeans_picks_one_per_separated_group() {
    let modules = [BlockKind::Cnn, BlockKind::Transformer, BlockKind::Lstm];
    let group_a = [vec![BlockKind::Cnn; 4], vec![BlockKind::Cnn, BlockKind::Cnn, BlockKind::Cnn, BlockKind::Lstm]];
    let group_b = [vec![BlockKind::Transformer; 4], vec![BlockKind::Lstm, BlockKind::Transformer, BlockKind::Transformer, BlockKind::Transformer]];
    let items: Vec<Vec<f64>> = group_a.iter().chain(&group_b).map(|t| one_hot_types(t, &modules)).collect();
    for seed in 0..10 {
        let r = kmeans_reduce(&items, 2, seed).unwrap();
        let picks: BTreeSet<bool> = r.representatives.iter().map(|&i| i < 2).collect();
        assert_eq!(picks.len(), 2, "seed {seed}: {:?}", r.representatives);
        assert_eq!(r.assignment[0], r.assignment[1]);
        assert_eq!(r.assignment[2], r.assignment[3]);
        assert_ne!(r.assignment[0], r.assignment[2]);
        assert_eq!(kmeans_reduce(&items, 2, seed).unwrap().representatives, r.representatives);
    }
}

#[test]
fn toy_space_is_valid() {
    let cfg = SpaceConfig {
        depths: vec![2],
        targets: vec![4],
        widths: vec![32, 64],
        modules: vec![BlockKind::Cnn, BlockKind::Transformer],
        h0: 32,
        tau: 0.5,
        seed: 0,
        block_options: BlockOptions::default(),
    };
    let paths = compose_space(&cfg).unwrap();
    assert_eq!(paths.len(), 4);
    let universe: BTreeSet<(Vec<BlockKind>, Vec<usize>)> = enum_type_paths(&cfg.modules, 2)
        .into_iter()
        .flat_map(|t| brute_monotone(&cfg.widths, 32, 2).into_iter().map(move |h| (t.clone(), h)))
        .collect();
    let got: BTreeSet<_> = paths.iter().map(|p| (p.types.clone(), p.dims.clone())).collect();
    assert_eq!(got.len(), 4);
    assert!(got.is_subset(&universe));
    assert_eq!(paths.iter().map(|p| p.path_id.as_str()).collect::<Vec<_>>(), ["d2-p0", "d2-p1", "d2-p2", "d2-p3"]);
    assert_eq!(common::tiny_space_problems(), None);
}

#[test]
fn infeasible_target_is_rejected() {
    let cfg = SpaceConfig {
        depths: vec![1],
        targets: vec![5],
        widths: vec![32],
        modules: vec![BlockKind::Cnn, BlockKind::Lstm],
        h0: 32,
        tau: 0.5,
        seed: 0,
        block_options: BlockOptions::default(),
    };
    assert!(compose_space(&cfg).is_err());
}

#[test]
fn unpruned_size_matches_brute_force() {
    for (widths, d_max, m) in [(vec![32, 64], 3, 2), (vec![16, 32, 64], 2, 3), (vec![64], 4, 5)] {
        let modules = BlockKind::ALL[..m].to_vec();
        let cfg = SpaceConfig {
            depths: (1..=d_max).collect(),
            targets: vec![1; d_max],
            widths: widths.clone(),
            modules: modules.clone(),
            h0: widths[0],
            tau: 0.5,
            seed: 0,
            block_options: BlockOptions::default(),
        };
        let brute: u128 =
            (1..=d_max).map(|d| (brute_monotone(&widths, widths[0], d).len() * enum_type_paths(&modules, d).len()) as u128).sum();
        assert_eq!(unpruned_size(&cfg), brute);
    }
}

#[test]
fn manifest_round_trip() {
    let cfg = SpaceConfig { depths: vec![2, 3], targets: vec![3, 3], widths: vec![16, 32], h0: 16, ..SpaceConfig::reference() };
    let paths = compose_space(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("paths.json");
    save_manifest(&paths, &f).unwrap();
    assert_eq!(load_manifest(&f).unwrap(), paths);
    assert_eq!(compose_space(&cfg).unwrap(), paths);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn random_configs_give_valid_paths(seed in 0u64..1000, nw in 1usize..4, m in 1usize..6, d in 1usize..4, k in 1usize..6) {
        let widths: Vec<usize> = [16, 32, 64][..nw].to_vec();
        let cfg = SpaceConfig {
            depths: vec![d],
            targets: vec![k],
            widths: widths.clone(),
            modules: BlockKind::ALL[..m].to_vec(),
            h0: 16,
            tau: 0.5,
            seed,
            block_options: BlockOptions::default(),
        };
        match compose_space(&cfg) {
            Ok(paths) => {
                prop_assert_eq!(paths.len(), k);
                for p in &paths {
                    prop_assert!(p.is_monotone(16));
                    prop_assert_eq!(p.types.len(), d);
                    prop_assert!(p.dims.iter().all(|w| widths.contains(w)));
                }
            }
            Err(_) => {
                let kept = greedy_select(&enum_dim_paths(&widths, 16, d), 0.5, 16).unwrap().len();
                prop_assert!(k > kept * m.pow(d as u32));
            }
        }
    }
}
