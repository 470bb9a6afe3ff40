use rand::seq::index::sample;
use rand::Rng as _;

use crate::linalg::{argmin, sq_dist};
use crate::util::Rng;

/// Lloyd's k-means over `n` row-major points, seeded with a random subset
/// of the points. Returns `k x dim` centroids.
///
/// With fewer points than centroids, the surplus centroids are jittered
/// copies of random points. Empty clusters keep their previous centroid.
pub fn kmeans(points: &[f64], dim: usize, k: usize, iters: usize, rng: &mut Rng) -> Vec<f64> {
    let n = points.len() / dim;
    assert!(n > 0, "kmeans needs at least one point");
    let mut centroids = Vec::with_capacity(k * dim);
    for i in sample(rng, n, k.min(n)) {
        centroids.extend_from_slice(&points[i * dim..(i + 1) * dim]);
    }
    if k > n {
        let scale = spread(points, dim).max(1e-6) * 1e-3;
        for _ in n..k {
            let i = rng.random_range(0..n);
            centroids.extend(points[i * dim..(i + 1) * dim].iter().map(|x| x + scale * rng.random_range(-1.0..1.0)));
        }
    }
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        for (a, p) in assign.iter_mut().zip(points.chunks_exact(dim)) {
            *a = argmin(centroids.chunks_exact(dim).map(|c| sq_dist(p, c)));
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(points.chunks_exact(dim)) {
            counts[a] += 1;
            sums[a * dim..(a + 1) * dim].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = s * inv;
                }
            }
        }
    }
    centroids
}

fn spread(points: &[f64], dim: usize) -> f64 {
    let n = points.len() / dim;
    let mut mean = vec![0.0; dim];
    for p in points.chunks_exact(dim) {
        mean.iter_mut().zip(p).for_each(|(m, x)| *m += x / n as f64);
    }
    (points.chunks_exact(dim).map(|p| sq_dist(p, &mean)).sum::<f64>() / (n * dim) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;

    #[test]
    fn finds_two_obvious_clusters() {
        let mut pts = vec![];
        for i in 0..10 {
            let d = i as f64 * 0.01;
            pts.extend([d, d]);
            pts.extend([10.0 + d, 10.0 - d]);
        }
        let c = kmeans(&pts, 2, 2, 10, &mut seeded_rng(1));
        let mut xs = [c[0], c[2]];
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((xs[0] - 0.045).abs() < 1e-9);
        assert!((xs[1] - 10.045).abs() < 1e-9);
    }

    #[test]
    fn more_centroids_than_points() {
        let pts = [1.0, 2.0, 3.0, 4.0];
        let c = kmeans(&pts, 2, 5, 3, &mut seeded_rng(2));
        assert_eq!(c.len(), 10);
        assert!(c.iter().all(|x| x.is_finite()));
    }
}
