//! One-dimensional k-means used to group box heights.
//!
//! Seeding picks a random first centroid among the distinct values, then
//! repeatedly adds the value farthest from its nearest centroid. Lloyd
//! iterations stop once assignments no longer change.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Cluster means, ascending.
    pub centroids: Vec<f64>,
    /// Cluster index per input value.
    pub assignments: Vec<usize>,
}

/// Clusters `values` into at most `k` groups; `k` is clamped to the number of
/// distinct values. Panics if `values` is empty or `k == 0`.
pub fn kmeans_1d(values: &[f64], k: usize, max_iters: usize, seed: u64) -> Clustering {
    assert!(!values.is_empty(), "kmeans_1d needs at least one value");
    assert!(k >= 1, "kmeans_1d needs k >= 1");

    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let k = k.min(distinct.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![distinct[rng.random_range(0..distinct.len())]];
    while centroids.len() < k {
        let mut best = distinct[0];
        let mut best_dist = -1.0;
        for &v in &distinct {
            let d = nearest(&centroids, v).1;
            if d > best_dist {
                best = v;
                best_dist = d;
            }
        }
        centroids.push(best);
    }
    centroids.sort_by(f64::total_cmp);

    let mut assignments: Vec<usize> = values.iter().map(|&v| nearest(&centroids, v).0).collect();
    for _ in 0..max_iters {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&v, &a) in values.iter().zip(&assignments) {
            sums[a] += v;
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c] / counts[c] as f64;
            }
        }
        let next: Vec<usize> = values.iter().map(|&v| nearest(&centroids, v).0).collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }

    // Keep centroids ascending so cluster ids are stable across seeds.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]));
    let mut remap = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    Clustering {
        centroids: order.iter().map(|&i| centroids[i]).collect(),
        assignments: assignments.iter().map(|&a| remap[a]).collect(),
    }
}

// Ties go to the lower index.
fn nearest(centroids: &[f64], v: f64) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &c) in centroids.iter().enumerate() {
        let d = (v - c).abs();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}
