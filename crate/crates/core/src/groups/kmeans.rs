//! Seeded Lloyd k-means with k-means++ initialisation.

use rand::Rng;

use crate::digest::rng_for;
use crate::error::{Error, Result};

/// Default number of k-means++ restarts. Ten still left small inputs
/// noticeably above the optimum now and then; fifty did not.
pub const DEFAULT_RESTARTS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansParams {
    pub max_iterations: usize,
    /// Independent k-means++ restarts; the lowest-SSE run is kept.
    pub restarts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            restarts: DEFAULT_RESTARTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Cluster index per input point.
    pub assignments: Vec<usize>,
    /// Mean of each cluster's members.
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster SSE after every Lloyd iteration of the kept run.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn sse(&self) -> f64 {
        *self.sse_history.last().expect("at least one iteration")
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of squared distances from each point to the mean of its cluster.
pub fn within_cluster_sse(points: &[Vec<f64>], assignments: &[usize], k: usize) -> f64 {
    let centroids = means(points, assignments, k);
    points
        .iter()
        .zip(assignments)
        .map(|(p, &c)| squared_distance(p, &centroids[c]))
        .sum()
}

/// Number of pairwise-distinct points (exact comparison).
pub fn distinct_count(points: &[Vec<f64>]) -> usize {
    let mut seen: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !seen.contains(&p) {
            seen.push(p);
        }
    }
    seen.len()
}

fn means(points: &[Vec<f64>], assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignments) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (sum, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            sum.iter_mut().for_each(|s| *s /= n as f64);
        }
    }
    sums
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut chosen = None;
        for (i, d) in dist.iter().enumerate() {
            if *d <= 0.0 {
                continue;
            }
            chosen = Some(i);
            if target < *d {
                break;
            }
            target -= d;
        }
        let idx = chosen.expect("k <= distinct points leaves a positive distance");
        centroids.push(points[idx].clone());
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &points[idx]));
        }
    }
    centroids
}

/// Gives every empty cluster the point farthest from its own centroid,
/// taken from a cluster with more than one member.
fn repair_empty(points: &[Vec<f64>], assignments: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &c in assignments.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let centroids = means(points, assignments, k);
        let donor = points
            .iter()
            .enumerate()
            .filter(|(i, _)| counts[assignments[*i]] > 1)
            .map(|(i, p)| (i, squared_distance(p, &centroids[assignments[i]])))
            .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            })
            .map(|(i, _)| i)
            .expect("k <= n leaves a cluster with spare members");
        assignments[donor] = empty;
    }
}

fn lloyd(points: &[Vec<f64>], k: usize, seed: u64, restart: u64, params: KMeansParams) -> KMeansResult {
    let mut rng = rng_for(seed, &[restart]);
    let init = plus_plus_init(points, k, &mut rng);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &init)).collect();
    repair_empty(points, &mut assignments, k);
    let mut centroids = means(points, &assignments, k);
    let mut sse_history = vec![within_cluster_sse(points, &assignments, k)];
    let mut iterations = 0;
    while iterations < params.max_iterations {
        iterations += 1;
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        repair_empty(points, &mut next, k);
        let stable = next == assignments;
        assignments = next;
        centroids = means(points, &assignments, k);
        sse_history.push(within_cluster_sse(points, &assignments, k));
        if stable {
            break;
        }
    }
    KMeansResult {
        assignments,
        centroids,
        sse_history,
        iterations,
    }
}

/// Clusters `points` into exactly `k` non-empty clusters.
///
/// Requires `1 <= k <= distinct points`. Each restart seeds with k-means++
/// and runs Lloyd iterations until assignments stop changing or
/// `max_iterations` is reached.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, params: KMeansParams) -> Result<KMeansResult> {
    let distinct = distinct_count(points);
    if k == 0 || k > distinct {
        return Err(Error::InvalidK { k, distinct });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidRequest("points differ in dimension".into()));
    }
    let mut best: Option<KMeansResult> = None;
    for restart in 0..params.restarts.max(1) as u64 {
        let run = lloyd(points, k, seed, restart, params);
        if best.as_ref().is_none_or(|b| run.sse() < b.sse()) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}
