//! Seeded k-means over per-question reward vectors with elbow-method model
//! selection.
//!
//! Each question contributes one low-dimensional point: its group's rollout
//! rewards, sorted in descending order so the point is invariant to rollout
//! ordering. [`kmeans`] runs Lloyd's iteration from a k-means++ seeding
//! driven by a deterministic generator; [`select_k_elbow`] scans k = 1..k_max
//! and stops at the first diminishing-returns elbow.

use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Hard ceiling on the cluster count scanned by the elbow method.
pub const K_CEILING: usize = 10;

const MAX_LLOYD_ITERATIONS: usize = 100;

/// Seeded k-means++ restarts per fit; the best-inertia solution wins. One
/// restart leaves too many tiny instances in local optima.
const KMEANS_RESTARTS: usize = 4;

/// Elbow-selection knobs: the configured cluster-count limit and the
/// diminishing-returns tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringSettings {
    pub k_max: usize,
    pub tau: f64,
}

impl Default for ClusteringSettings {
    fn default() -> Self {
        Self { k_max: K_CEILING, tau: 0.10 }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("no vectors to cluster")]
    NoVectors,
    #[error("k={k} exceeds the number of distinct vectors ({distinct})")]
    TooManyClusters { k: usize, distinct: usize },
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("vectors must share one dimension (got {first} and {second})")]
    DimensionMismatch { first: usize, second: usize },
    #[error("duplicate question id {0}")]
    DuplicateQuestionId(String),
    #[error("elbow tolerance must lie in (0,1), got {0}")]
    InvalidTolerance(f64),
}

/// One question's reward vector: the clustering point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub question_id: String,
    pub values: Vec<f64>,
}

impl RewardVector {
    pub fn new(question_id: impl Into<String>, values: Vec<f64>) -> Self {
        Self { question_id: question_id.into(), values }
    }

    /// Builds the vector with entries sorted in descending order, making the
    /// point invariant to rollout ordering within the group.
    pub fn sorted_desc(question_id: impl Into<String>, mut values: Vec<f64>) -> Self {
        values.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        Self { question_id: question_id.into(), values }
    }
}

/// A fitted k-means model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// question id -> cluster index in `[0, k)`.
    pub assignments: BTreeMap<String, usize>,
    /// Inertia of this model's solution.
    pub inertia: f64,
    /// Inertia for each k tried during model selection (index 0 is k=1).
    /// A single-k fit records one entry.
    pub inertia_by_k: Vec<f64>,
}

impl ClusterModel {
    pub fn cluster_members(&self, cluster: usize) -> impl Iterator<Item = &str> {
        self.assignments
            .iter()
            .filter(move |(_, &c)| c == cluster)
            .map(|(q, _)| q.as_str())
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distinct_count(vectors: &[RewardVector]) -> usize {
    let mut seen: Vec<&[f64]> = Vec::new();
    for v in vectors {
        if !seen.iter().any(|s| *s == v.values.as_slice()) {
            seen.push(&v.values);
        }
    }
    seen.len()
}

fn validate(vectors: &[RewardVector], k: usize) -> Result<usize, ClusterError> {
    if vectors.is_empty() {
        return Err(ClusterError::NoVectors);
    }
    if k == 0 {
        return Err(ClusterError::ZeroClusters);
    }
    let dim = vectors[0].values.len();
    for v in &vectors[1..] {
        if v.values.len() != dim {
            return Err(ClusterError::DimensionMismatch { first: dim, second: v.values.len() });
        }
    }
    let mut ids = std::collections::BTreeSet::new();
    for v in vectors {
        if !ids.insert(&v.question_id) {
            return Err(ClusterError::DuplicateQuestionId(v.question_id.clone()));
        }
    }
    let distinct = distinct_count(vectors);
    if k > distinct {
        return Err(ClusterError::TooManyClusters { k, distinct });
    }
    Ok(distinct)
}

/// k-means++ seeding: first centroid uniform, each further centroid sampled
/// with probability proportional to its squared distance from the nearest
/// chosen centroid.
fn kmeanspp_init(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].to_vec());
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let chosen = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut index = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    index = i;
                    break;
                }
                target -= w;
            }
            index
        } else {
            // all points coincide with chosen centroids; cannot happen when
            // k <= distinct count, but keep a deterministic fallback
            0
        };
        centroids.push(points[chosen].to_vec());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, centroids.last().unwrap()));
        }
    }
    centroids
}

fn assign(points: &[&[f64]], centroids: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = squared_distance(p, centroid);
                // strict < keeps ties on the lowest cluster index
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty_clusters(points: &[&[f64]], centroids: &[Vec<f64>], assignments: &mut [usize], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else { return };
        let mut farthest = None;
        let mut farthest_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if sizes[assignments[i]] <= 1 {
                continue;
            }
            let d = squared_distance(p, &centroids[assignments[i]]);
            if d > farthest_d {
                farthest_d = d;
                farthest = Some(i);
            }
        }
        match farthest {
            Some(i) => assignments[i] = empty,
            None => return,
        }
    }
}

fn lloyd(points: &[&[f64]], mut centroids: Vec<Vec<f64>>, k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = points[0].len();
    let mut assignments = assign(points, &centroids);
    repair_empty_clusters(points, &centroids, &mut assignments, k);
    for _ in 0..MAX_LLOYD_ITERATIONS {
        // centroid update
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(assignments.iter()) {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        for (c, (sum, &count)) in sums.iter().zip(counts.iter()).enumerate() {
            if count > 0 {
                for (dst, &s) in centroids[c].iter_mut().zip(sum.iter()) {
                    *dst = s / count as f64;
                }
            }
        }
        let mut next = assign(points, &centroids);
        repair_empty_clusters(points, &centroids, &mut next, k);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    (centroids, assignments)
}

fn inertia_of(points: &[&[f64]], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum()
}

/// Input order must not matter (permuted inputs may differ only by cluster
/// relabeling), so every fit works on a canonically sorted view: by values,
/// then by question id.
fn canonical_order(vectors: &[RewardVector]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..vectors.len()).collect();
    order.sort_by(|&a, &b| {
        vectors[a]
            .values
            .partial_cmp(&vectors[b].values)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| vectors[a].question_id.cmp(&vectors[b].question_id))
    });
    order
}

fn finish(
    vectors: &[RewardVector],
    order: &[usize],
    points: &[&[f64]],
    centroids: Vec<Vec<f64>>,
    assignments: Vec<usize>,
    k: usize,
) -> ClusterModel {
    let inertia = inertia_of(points, &centroids, &assignments);
    let assignments = order
        .iter()
        .zip(assignments)
        .map(|(&i, a)| (vectors[i].question_id.clone(), a))
        .collect();
    ClusterModel { k, centroids, assignments, inertia, inertia_by_k: vec![inertia] }
}

fn fit_once(vectors: &[RewardVector], k: usize, seed: u64) -> ClusterModel {
    let order = canonical_order(vectors);
    let points: Vec<&[f64]> = order.iter().map(|&i| vectors[i].values.as_slice()).collect();
    let mut best: Option<ClusterModel> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = rng::stream(seed, &["kmeans", &k.to_string(), &restart.to_string()]);
        let init = kmeanspp_init(&points, k, &mut rng);
        let (centroids, assignments) = lloyd(&points, init, k);
        let model = finish(vectors, &order, &points, centroids, assignments, k);
        if best.as_ref().map_or(true, |b| model.inertia < b.inertia) {
            best = Some(model);
        }
    }
    best.expect("at least one restart")
}

/// Warm start for k clusters from a (k-1)-cluster solution: reuse its
/// centroids and add the point farthest from them. Lloyd's iteration from
/// this start can only improve on the previous inertia, which keeps the
/// inertia profile non-increasing in k.
fn fit_warm(vectors: &[RewardVector], k: usize, previous: &ClusterModel) -> ClusterModel {
    let order = canonical_order(vectors);
    let points: Vec<&[f64]> = order.iter().map(|&i| vectors[i].values.as_slice()).collect();
    let mut centroids = previous.centroids.clone();
    let farthest = points
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| {
            let da: f64 =
                centroids.iter().map(|c| squared_distance(a, c)).fold(f64::INFINITY, f64::min);
            let db: f64 =
                centroids.iter().map(|c| squared_distance(b, c)).fold(f64::INFINITY, f64::min);
            da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    centroids.push(points[farthest].to_vec());
    let (centroids, assignments) = lloyd(&points, centroids, k);
    finish(vectors, &order, &points, centroids, assignments, k)
}

/// Fits k-means for a single k. Lloyd's iteration from a k-means++ seeding,
/// at most 100 sweeps, ties broken toward the lowest cluster index, empty
/// clusters repaired by moving in the farthest point.
pub fn kmeans(vectors: &[RewardVector], k: usize, seed: u64) -> Result<ClusterModel, ClusterError> {
    validate(vectors, k)?;
    Ok(fit_once(vectors, k, seed))
}

/// Pure elbow rule on an inertia profile (`inertias[i]` is the inertia at
/// k = i+1). Returns the selected k: the first k-1 where the inertia drop
/// falls below `tau` times the previous drop, or the largest k tried.
pub fn elbow_from_inertia(inertias: &[f64], tau: f64) -> usize {
    for k in 3..=inertias.len() {
        let delta_prev = inertias[k - 3] - inertias[k - 2];
        let delta = inertias[k - 2] - inertias[k - 1];
        if delta < tau * delta_prev {
            return k - 1;
        }
    }
    inertias.len()
}

/// Fits k = 1..k_max and picks the cluster count by the elbow rule with
/// tolerance `tau`, where `k_max = min(k_max_limit, N_unique, 10)`.
///
/// The scan stops at the first elbow. Each k is fitted once from its seeded
/// k-means++ start; if that fit lands above the previous k's inertia, a warm
/// start from the previous solution replaces it so the recorded profile is
/// non-increasing.
pub fn select_k_elbow(
    vectors: &[RewardVector],
    k_max_limit: usize,
    tau: f64,
    seed: u64,
) -> Result<ClusterModel, ClusterError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(ClusterError::InvalidTolerance(tau));
    }
    let distinct = validate(vectors, 1)?;
    let k_max = k_max_limit.max(1).min(distinct).min(K_CEILING);
    let mut models: Vec<ClusterModel> = Vec::with_capacity(k_max);
    let mut inertias: Vec<f64> = Vec::with_capacity(k_max);
    let mut selected = k_max;
    for k in 1..=k_max {
        let mut model = fit_once(vectors, k, seed);
        if let Some(previous) = models.last() {
            if model.inertia > previous.inertia {
                let warm = fit_warm(vectors, k, previous);
                if warm.inertia < model.inertia {
                    model = warm;
                }
            }
        }
        inertias.push(model.inertia);
        models.push(model);
        if elbow_from_inertia(&inertias, tau) < k {
            selected = k - 1;
            break;
        }
    }
    let mut model = models.swap_remove(selected - 1);
    model.inertia_by_k = inertias;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vectors(values: &[&[f64]]) -> Vec<RewardVector> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| RewardVector::new(format!("q{i}"), v.to_vec()))
            .collect()
    }

    #[test]
    fn separable_duplicates() {
        let vs = vectors(&[&[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let model = kmeans(&vs, 2, 7).unwrap();
        assert!(model.inertia.abs() < 1e-12);
        let mut centroids = model.centroids.clone();
        centroids.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(centroids, vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!(model.assignments["q0"], model.assignments["q1"]);
        assert_eq!(model.assignments["q2"], model.assignments["q3"]);
        assert_ne!(model.assignments["q0"], model.assignments["q2"]);
    }

    #[test]
    fn k1_is_componentwise_mean() {
        let vs = vectors(&[&[0.0, 1.0], &[1.0, 0.0], &[0.5, 0.5], &[0.5, 0.5]]);
        let model = kmeans(&vs, 1, 3).unwrap();
        assert_eq!(model.centroids.len(), 1);
        assert!((model.centroids[0][0] - 0.5).abs() < 1e-12);
        assert!((model.centroids[0][1] - 0.5).abs() < 1e-12);
        let expected: f64 = vs
            .iter()
            .map(|v| {
                (v.values[0] - 0.5) * (v.values[0] - 0.5) + (v.values[1] - 0.5) * (v.values[1] - 0.5)
            })
            .sum();
        assert!((model.inertia - expected).abs() < 1e-12);
    }

    #[test]
    fn two_cluster_line() {
        // exhaustive check for n=4: optimal split is {0, 0.1} vs {0.9, 1}
        let vs = vectors(&[&[0.0], &[0.1], &[0.9], &[1.0]]);
        let model = kmeans(&vs, 2, 11).unwrap();
        assert!((model.inertia - 0.01).abs() < 1e-12, "inertia {}", model.inertia);
        assert_eq!(model.assignments["q0"], model.assignments["q1"]);
        assert_eq!(model.assignments["q2"], model.assignments["q3"]);
    }

    #[test]
    fn k_bounds_rejected() {
        let vs = vectors(&[&[0.0], &[0.0], &[1.0]]);
        assert_eq!(kmeans(&vs, 0, 1).unwrap_err(), ClusterError::ZeroClusters);
        assert_eq!(
            kmeans(&vs, 3, 1).unwrap_err(),
            ClusterError::TooManyClusters { k: 3, distinct: 2 }
        );
    }

    #[test]
    fn deterministic_for_seed() {
        let vs = vectors(&[&[0.1], &[0.2], &[0.35], &[0.8], &[0.9]]);
        let a = kmeans(&vs, 2, 42).unwrap();
        let b = kmeans(&vs, 2, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn elbow_profile_rule() {
        // deltas: 60, 2 -> 2 < 0.1*60, elbow at k=2
        assert_eq!(elbow_from_inertia(&[100.0, 40.0, 38.0, 37.0], 0.10), 2);
        // geometric decay ratio 0.5 never violates tau=0.1
        assert_eq!(elbow_from_inertia(&[16.0, 8.0, 4.0, 2.0, 1.0], 0.10), 5);
        // too short for the rule
        assert_eq!(elbow_from_inertia(&[5.0, 1.0], 0.10), 2);
        assert_eq!(elbow_from_inertia(&[5.0], 0.10), 1);
    }

    #[test]
    fn identical_vectors_select_k1() {
        let vs = vectors(&[&[0.4, 0.4], &[0.4, 0.4], &[0.4, 0.4]]);
        let model = select_k_elbow(&vs, 10, 0.10, 5).unwrap();
        assert_eq!(model.k, 1);
        assert!(model.inertia.abs() < 1e-12);
    }

    #[test]
    fn elbow_never_exceeds_unique_count_or_ceiling() {
        let vs: Vec<RewardVector> = (0..30)
            .map(|i| RewardVector::new(format!("q{i}"), vec![(i % 4) as f64]))
            .collect();
        let model = select_k_elbow(&vs, 10, 0.10, 9).unwrap();
        assert!(model.k <= 4);
        let many: Vec<RewardVector> =
            (0..40).map(|i| RewardVector::new(format!("q{i}"), vec![i as f64 * 1.7])).collect();
        let model = select_k_elbow(&many, 25, 0.10, 9).unwrap();
        assert!(model.k <= K_CEILING);
    }

    #[test]
    fn elbow_inertia_profile_non_increasing() {
        let vs: Vec<RewardVector> = (0..24)
            .map(|i| {
                RewardVector::new(
                    format!("q{i}"),
                    vec![(i as f64 * 0.37) % 1.0, (i as f64 * 0.61) % 1.0],
                )
            })
            .collect();
        for seed in 0..20 {
            let model = select_k_elbow(&vs, 10, 0.10, seed).unwrap();
            for pair in model.inertia_by_k.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-12, "profile not monotone: {:?}", model.inertia_by_k);
            }
        }
    }

    #[test]
    fn sorted_desc_sorts() {
        let v = RewardVector::sorted_desc("q", vec![0.1, 0.9, 0.5]);
        assert_eq!(v.values, vec![0.9, 0.5, 0.1]);
    }

    #[test]
    fn every_cluster_reachable() {
        let vs = vectors(&[&[0.0], &[0.5], &[1.0], &[0.2], &[0.8]]);
        let model = kmeans(&vs, 3, 17).unwrap();
        for c in 0..model.k {
            assert!(model.cluster_members(c).next().is_some(), "cluster {c} empty");
        }
    }
}
