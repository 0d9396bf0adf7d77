//! Mini-batch k-means with k-means++ seeding.
//!
//! When the batch covers the whole data set the update degenerates to
//! Lloyd's algorithm, whose inertia never increases.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MccError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub batch_size: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            batch_size: 1024,
            iters: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Array2<f64>,
    /// Whole-data inertia after each full-batch iteration (empty in
    /// mini-batch mode).
    pub inertia: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Sum of squared distances to the nearest centroid.
pub fn inertia(points: ArrayView2<f64>, centroids: &Array2<f64>) -> f64 {
    points
        .rows()
        .into_iter()
        .map(|x| nearest(x, centroids).1)
        .sum()
}

fn plus_plus_init(points: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|x| sq_dist(x, centroids.row(0)))
        .collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(j).assign(&points.row(pick));
        for (i, x) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, centroids.row(j)));
        }
    }
    centroids
}

pub fn mini_batch_kmeans(
    points: ArrayView2<f64>,
    k: usize,
    opts: &KMeansOptions,
) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 {
        return Err(MccError::config("k-means needs k >= 1"));
    }
    if n < k {
        return Err(MccError::config(format!(
            "k-means over {n} points cannot produce {k} clusters; reduce K_c or supply more data"
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(MccError::Data("k-means input contains non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let dim = points.ncols();
    let mut history = Vec::new();

    if opts.batch_size >= n {
        for _ in 0..opts.iters {
            let mut sums = Array2::<f64>::zeros((k, dim));
            let mut counts = vec![0usize; k];
            for x in points.rows() {
                let (j, _) = nearest(x, &centroids);
                let mut row = sums.row_mut(j);
                row += &x;
                counts[j] += 1;
            }
            let mut moved = false;
            for j in 0..k {
                if counts[j] == 0 {
                    continue;
                }
                let mean = sums.row(j).mapv(|v| v / counts[j] as f64);
                if mean != centroids.row(j) {
                    moved = true;
                    centroids.row_mut(j).assign(&mean);
                }
            }
            history.push(inertia(points, &centroids));
            if !moved {
                break;
            }
        }
    } else {
        let mut seen = vec![0usize; k];
        for _ in 0..opts.iters {
            let batch: Vec<usize> = (0..opts.batch_size).map(|_| rng.random_range(0..n)).collect();
            let assigned: Vec<usize> = batch
                .iter()
                .map(|&i| nearest(points.row(i), &centroids).0)
                .collect();
            for (&i, &j) in batch.iter().zip(&assigned) {
                seen[j] += 1;
                let eta = 1.0 / seen[j] as f64;
                let x = points.row(i);
                centroids
                    .row_mut(j)
                    .zip_mut_with(&x, |c, &v| *c += eta * (v - *c));
            }
        }
    }
    Ok(KMeansResult {
        centroids,
        inertia: history,
    })
}
