//! Search-space enumeration and pruning.
//!
//! Per depth, monotone width tuples are thinned by a greedy log-distance
//! filter and then clustered; block-type tuples are clustered directly. The
//! two reduced lists are zipped into paths.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path as FsPath;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockKey, BlockKind, BlockOptions};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceConfig {
    pub depths: Vec<usize>,
    /// Paths to keep per depth, aligned with `depths`.
    pub targets: Vec<usize>,
    pub widths: Vec<usize>,
    pub modules: Vec<BlockKind>,
    /// Embedding width feeding the first block.
    pub h0: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub block_options: BlockOptions,
}

fn default_tau() -> f64 {
    0.5
}

impl SpaceConfig {
    /// Depths 3..=6 with 60/100/100/100 paths over widths 64..512.
    pub fn reference() -> Self {
        Self {
            depths: vec![3, 4, 5, 6],
            targets: vec![60, 100, 100, 100],
            widths: vec![64, 128, 256, 512],
            modules: BlockKind::ALL.to_vec(),
            h0: 64,
            tau: 0.5,
            seed: 0,
            block_options: BlockOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depths.is_empty() || self.depths.len() != self.targets.len() {
            return bad(format!("{} depths but {} targets", self.depths.len(), self.targets.len()));
        }
        if self.depths.contains(&0) || self.targets.contains(&0) {
            return bad("depths and targets must be at least 1".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) || self.h0 == 0 {
            return bad("widths and h0 must be positive".into());
        }
        if self.modules.is_empty() {
            return bad("module set is empty".into());
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        let min = *self.widths.iter().min().expect("non-empty");
        if self.h0 > min && !self.widths.contains(&self.h0) {
            return bad(format!("h0 {} must be at most the smallest width or one of the widths", self.h0));
        }
        Ok(())
    }

    fn sorted_widths(&self) -> Vec<usize> {
        self.widths.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    fn sorted_modules(&self) -> Vec<BlockKind> {
        self.modules.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }
}

/// One candidate architecture.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Path {
    pub path_id: String,
    pub depth: usize,
    pub types: Vec<BlockKind>,
    pub dims: Vec<usize>,
}

impl Path {
    pub fn new(path_id: impl Into<String>, types: Vec<BlockKind>, dims: Vec<usize>) -> Result<Self> {
        if types.len() != dims.len() || types.is_empty() {
            return Err(Error::Config(format!("path with {} types and {} dims", types.len(), dims.len())));
        }
        Ok(Self { path_id: path_id.into(), depth: types.len(), types, dims })
    }

    /// Block keys along the path, with widths chained from `h0`.
    pub fn layers(&self, h0: usize) -> Vec<BlockKey> {
        let mut din = h0;
        self.types
            .iter()
            .zip(&self.dims)
            .map(|(&kind, &dout)| {
                let key = BlockKey { kind, dim_in: din, dim_out: dout };
                din = dout;
                key
            })
            .collect()
    }

    pub fn is_monotone(&self, h0: usize) -> bool {
        self.dims.first().is_some_and(|&d| d >= h0) && self.dims.windows(2).all(|w| w[1] >= w[0])
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("paths are non-empty")
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.path_id)?;
        for (t, d) in self.types.iter().zip(&self.dims) {
            write!(f, " {t}({d})")?;
        }
        Ok(())
    }
}

/// Every non-decreasing tuple of length `d` over widths `>= h0`, in
/// lexicographic order.
pub fn enum_dim_paths(widths: &[usize], h0: usize, d: usize) -> Vec<Vec<usize>> {
    let eligible: Vec<usize> =
        widths.iter().copied().filter(|&w| w >= h0).collect::<BTreeSet<_>>().into_iter().collect();
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(d);
    fn rec(eligible: &[usize], start: usize, d: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == d {
            out.push(cur.clone());
            return;
        }
        for i in start..eligible.len() {
            cur.push(eligible[i]);
            rec(eligible, i, d, cur, out);
            cur.pop();
        }
    }
    if d > 0 {
        rec(&eligible, 0, d, &mut cur, &mut out);
    }
    out
}

/// Every length-`d` tuple over `modules`, in lexicographic order.
pub fn enum_type_paths(modules: &[BlockKind], d: usize) -> Vec<Vec<BlockKind>> {
    let n = modules.len();
    let total = n.pow(d as u32);
    (0..total)
        .map(|mut i| {
            let mut t = vec![modules[0]; d];
            for slot in t.iter_mut().rev() {
                *slot = modules[i % n];
                i /= n;
            }
            t
        })
        .collect()
}

/// Euclidean distance between `(h0, ha..)` and `(h0, hb..)` in log2 space.
/// The shared `h0` term is zero but kept for fidelity to the definition.
pub fn log_distance(ha: &[usize], hb: &[usize], h0: usize) -> Result<f64> {
    if ha.len() != hb.len() {
        return Err(Error::LengthMismatch(ha.len(), hb.len()));
    }
    if h0 == 0 || ha.iter().chain(hb).any(|&h| h == 0) {
        return Err(Error::Config("dimensions must be positive".into()));
    }
    let l = |h: usize| (h as f64).log2();
    let sq: f64 = std::iter::once((h0, h0))
        .chain(ha.iter().copied().zip(hb.iter().copied()))
        .map(|(a, b)| (l(a) - l(b)).powi(2))
        .sum();
    Ok(sq.sqrt())
}

/// Scans `paths` in lexicographic order, keeping a path when it is at least
/// `tau` away from everything kept so far (and never an exact duplicate).
pub fn greedy_select(paths: &[Vec<usize>], tau: f64, h0: usize) -> Result<Vec<Vec<usize>>> {
    let mut sorted = paths.to_vec();
    sorted.sort();
    let mut kept: Vec<Vec<usize>> = Vec::new();
    for p in sorted {
        let mut keep = true;
        for k in &kept {
            let d = log_distance(&p, k, h0)?;
            if d < tau || d == 0.0 {
                keep = false;
                break;
            }
        }
        if keep {
            kept.push(p);
        }
    }
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// Index of the item nearest each centroid, sorted ascending.
    pub representatives: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Cluster of each item.
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.iter().enumerate() {
        let d = sq_dist(point, cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-9;

/// k-means++ seeding followed by Lloyd iterations; returns one real item per
/// cluster (the one nearest its centroid, ties to the lowest index).
pub fn kmeans_reduce(items: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    let distinct = items.iter().map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<HashSet<_>>().len();
    if k == 0 || k > distinct {
        return Err(Error::TooFew { k, available: distinct });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![items[rng.random_range(0..items.len())].clone()];
    let mut d2: Vec<f64> = items.iter().map(|x| sq_dist(x, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut r = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                pick = Some(i);
                if r < w {
                    break;
                }
                r -= w;
            }
        }
        let c = items[pick.expect("fewer distinct items than k")].clone();
        for (d, x) in d2.iter_mut().zip(items) {
            *d = d.min(sq_dist(x, &c));
        }
        centroids.push(c);
    }
    let mut assignment = vec![0; items.len()];
    let mut inertia = f64::INFINITY;
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let assigned: Vec<(usize, f64)> = items.par_iter().map(|x| nearest(x, &centroids)).collect();
        let new_inertia: f64 = assigned.iter().map(|a| a.1).sum();
        for (slot, a) in assignment.iter_mut().zip(&assigned) {
            *slot = a.0;
        }
        let dim = items[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &c) in items.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..k {
            // An empty cluster keeps its previous centroid.
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let delta = (inertia - new_inertia).abs();
        inertia = new_inertia;
        if delta < KMEANS_TOL {
            break;
        }
    }
    let mut taken = vec![false; items.len()];
    let mut representatives = Vec::with_capacity(k);
    for cent in &centroids {
        let mut order: Vec<(f64, usize)> = items.iter().enumerate().map(|(i, x)| (sq_dist(x, cent), i)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let chosen = order
            .into_iter()
            .map(|(_, i)| i)
            .find(|&i| !taken[i] && !representatives.iter().any(|&r: &usize| items[r] == items[i]))
            .expect("k <= distinct items");
        taken[chosen] = true;
        representatives.push(chosen);
    }
    representatives.sort_unstable();
    Ok(KMeansResult { representatives, centroids, assignment, inertia, iterations })
}

pub fn one_hot_types(types: &[BlockKind], modules: &[BlockKind]) -> Vec<f64> {
    let mut v = vec![0.0; types.len() * modules.len()];
    for (i, t) in types.iter().enumerate() {
        let j = modules.iter().position(|m| m == t).expect("type drawn from module set");
        v[i * modules.len() + j] = 1.0;
    }
    v
}

pub fn log2_dims(dims: &[usize]) -> Vec<f64> {
    dims.iter().map(|&d| (d as f64).log2()).collect()
}

/// Reduced configuration lists for one depth, with the items ordered by
/// nearness to each representative for duplicate replacement.
struct Reduced<T> {
    all: Vec<T>,
    picks: Vec<usize>,
    /// For each pick, all items sorted by distance to that pick's centroid.
    fallback: Vec<Vec<usize>>,
}

fn reduce<T: Clone>(all: Vec<T>, vectors: Vec<Vec<f64>>, k: usize, seed: u64) -> Result<Reduced<T>> {
    let k = k.min(all.len());
    let km = kmeans_reduce(&vectors, k, seed)?;
    let fallback = km
        .representatives
        .iter()
        .map(|&r| {
            let cent = &km.centroids[km.assignment[r]];
            let mut order: Vec<(f64, usize)> = vectors.iter().enumerate().map(|(i, v)| (sq_dist(v, cent), i)).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            order.into_iter().map(|(_, i)| i).collect()
        })
        .collect();
    Ok(Reduced { all, picks: km.representatives, fallback })
}

/// Paths for one depth: the zip of reduced type and width lists, cycling the
/// shorter, with duplicates replaced by the next-nearest candidate.
pub fn compose_depth(cfg: &SpaceConfig, d: usize, k: usize) -> Result<Vec<Path>> {
    let widths = cfg.sorted_widths();
    let modules = cfg.sorted_modules();
    let dim_all = greedy_select(&enum_dim_paths(&widths, cfg.h0, d), cfg.tau, cfg.h0)?;
    let type_all = enum_type_paths(&modules, d);
    let available = dim_all.len() * type_all.len();
    if k > available {
        return Err(Error::Config(format!("depth {d}: target {k} exceeds the {available} available combinations")));
    }
    let seed = cfg.seed.wrapping_add(d as u64);
    let dim_vecs = dim_all.iter().map(|h| log2_dims(h)).collect();
    let dims = reduce(dim_all, dim_vecs, k, seed)?;
    let type_vecs = type_all.iter().map(|t| one_hot_types(t, &modules)).collect();
    let types = reduce(type_all, type_vecs, k, seed)?;

    let mut used: HashSet<(usize, usize)> = HashSet::new();
    let mut pairs = Vec::with_capacity(k);
    for i in 0..k {
        let (ti, di) = (i % types.picks.len(), i % dims.picks.len());
        let first = (types.picks[ti], dims.picks[di]);
        let pair = if !used.contains(&first) {
            first
        } else {
            let by_dim = dims.fallback[di].iter().map(|&dd| (first.0, dd));
            let by_type = types.fallback[ti].iter().map(|&tt| (tt, first.1));
            let anywhere = (0..types.all.len()).flat_map(|t| (0..dims.all.len()).map(move |dd| (t, dd)));
            by_dim.chain(by_type).chain(anywhere).find(|p| !used.contains(p)).expect("k <= available")
        };
        used.insert(pair);
        pairs.push(pair);
    }
    pairs
        .into_iter()
        .enumerate()
        .map(|(i, (t, dd))| Path::new(format!("d{d}-p{i}"), types.all[t].clone(), dims.all[dd].clone()))
        .collect()
}

pub fn compose_space(cfg: &SpaceConfig) -> Result<Vec<Path>> {
    cfg.validate()?;
    let per_depth: Vec<Result<Vec<Path>>> = cfg
        .depths
        .par_iter()
        .zip(&cfg.targets)
        .map(|(&d, &k)| compose_depth(cfg, d, k))
        .collect();
    let mut out = Vec::new();
    for r in per_depth {
        out.extend(r?);
    }
    Ok(out)
}

/// Size of the space before any pruning: monotone width tuples times type tuples.
pub fn unpruned_size(cfg: &SpaceConfig) -> u128 {
    let widths = cfg.sorted_widths();
    let m = cfg.sorted_modules().len() as u128;
    cfg.depths
        .iter()
        .map(|&d| enum_dim_paths(&widths, cfg.h0, d).len() as u128 * m.pow(d as u32))
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceStats {
    pub paths: usize,
    pub per_depth: BTreeMap<usize, usize>,
    pub unique_blocks: usize,
    pub total_layers: usize,
    pub unpruned: u128,
}

pub fn space_stats(cfg: &SpaceConfig, paths: &[Path]) -> SpaceStats {
    let mut per_depth = BTreeMap::new();
    let mut keys = HashSet::new();
    let mut total_layers = 0;
    for p in paths {
        *per_depth.entry(p.depth).or_default() += 1;
        total_layers += p.depth;
        keys.extend(p.layers(cfg.h0));
    }
    SpaceStats { paths: paths.len(), per_depth, unique_blocks: keys.len(), total_layers, unpruned: unpruned_size(cfg) }
}

pub fn save_manifest(paths: &[Path], file: &FsPath) -> Result<()> {
    fs::write(file, serde_json::to_vec_pretty(paths)?).map_err(|e| Error::io(file, e))
}

pub fn load_manifest(file: &FsPath) -> Result<Vec<Path>> {
    let text = fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
    let paths: Vec<Path> = serde_json::from_str(&text)?;
    for p in &paths {
        if p.types.len() != p.depth || p.dims.len() != p.depth {
            return Err(Error::Config(format!("{}: depth does not match its layers", p.path_id)));
        }
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_widths_depth_two() {
        assert_eq!(enum_dim_paths(&[64, 128], 64, 2), vec![vec![64, 64], vec![64, 128], vec![128, 128]]);
        assert_eq!(enum_dim_paths(&[64], 64, 5).len(), 1);
    }

    #[test]
    fn log_distance_examples() {
        assert_eq!(log_distance(&[64, 128], &[64, 128], 64).unwrap(), 0.0);
        assert_eq!(log_distance(&[64, 128], &[64, 256], 64).unwrap(), 1.0);
        assert!(log_distance(&[0], &[64], 64).is_err());
    }

    #[test]
    fn greedy_thresholds() {
        let all = enum_dim_paths(&[64, 128, 256], 64, 2);
        let mut with_dup = all.clone();
        with_dup.push(all[0].clone());
        assert_eq!(greedy_select(&with_dup, 0.0, 64).unwrap(), all);
        assert_eq!(greedy_select(&all, f64::INFINITY, 64).unwrap(), vec![all[0].clone()]);
    }

    #[test]
    fn kmeans_with_k_equal_to_items_selects_all() {
        let items: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        assert_eq!(kmeans_reduce(&items, 6, 1).unwrap().representatives, (0..6).collect::<Vec<_>>());
        assert!(matches!(kmeans_reduce(&items, 7, 1), Err(Error::TooFew { k: 7, available: 6 })));
    }

    #[test]
    fn reference_space_has_360_paths() {
        let cfg = SpaceConfig::reference();
        let paths = compose_space(&cfg).unwrap();
        assert_eq!(paths.len(), 360);
        assert!(paths.iter().all(|p| p.is_monotone(cfg.h0)));
        let distinct: HashSet<_> = paths.iter().map(|p| (&p.types, &p.dims)).collect();
        assert_eq!(distinct.len(), 360);
    }
}
