//! Seeded Lloyd k-means with k-means++ initialization.
//!
//! Points are rows of a flat row-major buffer. Used for GeoPE anchors (2-D) and for
//! codebook initialization in the quantizer.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub dim: usize,
    /// `k * dim` centroid coordinates.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `centroids` to `p`; ties go to the lowest index.
pub fn nearest(p: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus_init(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    while centroids.len() < k * dim {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // All remaining mass is zero: fewer distinct points than k.
            Err(_) => rng.gen_range(0..n),
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(next));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &centroids[start..start + dim]));
        }
    }
    centroids
}

/// Runs k-means until assignments stop changing or `max_iters` is reached.
///
/// Panics if `points` is empty or `k == 0`; callers validate their own preconditions.
pub fn kmeans(points: &[f64], dim: usize, k: usize, max_iters: usize, seed: u64) -> KMeans {
    assert!(dim > 0 && !points.is_empty() && points.len().is_multiple_of(dim));
    assert!(k > 0);
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, dim, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        for (i, a) in assignments.iter_mut().enumerate() {
            let (c, _) = nearest(row(i), &centroids, dim);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        let mut reseeded = false;
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            } else {
                // Empty cluster: move it onto the point farthest from its centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(row(a), &centroids[assignments[a] * dim..][..dim]);
                        let db = sq_dist(row(b), &centroids[assignments[b] * dim..][..dim]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("non-empty");
                centroids[c * dim..(c + 1) * dim].copy_from_slice(row(far));
                assignments[far] = c;
                reseeded = true;
            }
        }
        if !changed && !reseeded {
            break;
        }
    }
    KMeans {
        dim,
        centroids,
        assignments,
        iterations,
    }
}
