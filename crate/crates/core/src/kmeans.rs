//! K-means with k-means++ seeding, used to cluster feature-map pixels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::named_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Distinct centers after merging duplicates.
    pub centers: Vec<Vec<f64>>,
    /// Cluster index of every point.
    pub labels: Vec<usize>,
    pub iterations: usize,
    /// Sum of squared distances to assigned centers.
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center, lowest index on ties.
fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_centers(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = named_rng(seed, "kmeans++");
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = points.len() - 1;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = points[pick].clone();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// Lloyd iterations from k-means++ seeds; stops after `max_iter` rounds or
/// when no center moves more than `tol`. Identical centers are merged, so
/// degenerate inputs may return fewer than `k` clusters.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansResult> {
    if k < 2 {
        return Err(Error::domain(format!("k = {k}, need at least 2")));
    }
    if k > points.len() {
        return Err(Error::domain(format!("k = {k} exceeds {} points", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("points have different dimensions"));
    }
    let mut centers = seed_centers(points, k, seed);
    let mut labels = vec![0; points.len()];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        for (i, p) in points.iter().enumerate() {
            labels[i] = nearest(p, &centers).0;
        }
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut moved: f64 = 0.0;
        for c in 0..centers.len() {
            if counts[c] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            moved = moved.max(sq_dist(&new, &centers[c]).sqrt());
            centers[c] = new;
        }
        if moved <= tol {
            break;
        }
    }
    // Merge duplicates and drop empty clusters, keeping first-seen order.
    let mut distinct: Vec<Vec<f64>> = Vec::new();
    for c in &centers {
        if !distinct.contains(c) {
            distinct.push(c.clone());
        }
    }
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (l, d) = nearest(p, &distinct);
        labels[i] = l;
        inertia += d;
    }
    let mut used: Vec<usize> = labels.clone();
    used.sort_unstable();
    used.dedup();
    let remap: Vec<Option<usize>> = (0..distinct.len()).map(|c| used.iter().position(|&u| u == c)).collect();
    let centers = used.iter().map(|&u| distinct[u].clone()).collect();
    for l in labels.iter_mut() {
        *l = remap[*l].expect("assigned clusters are nonempty");
    }
    Ok(KMeansResult {
        centers,
        labels,
        iterations,
        inertia,
    })
}
