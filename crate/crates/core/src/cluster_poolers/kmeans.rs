use rand::seq::index::sample;

use super::sq_dist_matrix;
use crate::error::{Error, Result};
use crate::framework::{AttentionMatrix, FeatureMap, PooledSet};
use crate::matcore::Mat;
use crate::rng::seeded;

/// `J(U) = sum_i min_j |x_i - u_j|^2`.
pub fn distortion(x: &Mat, u: &Mat) -> Result<f64> {
    let d = sq_dist_matrix(x, u)?;
    Ok((0..d.rows())
        .map(|i| d.row(i).iter().copied().fold(f64::INFINITY, f64::min))
        .sum())
}

/// Index of the nearest center for every feature, ties to the lowest index.
pub fn assign(x: &Mat, u: &Mat) -> Result<Vec<usize>> {
    let d = sq_dist_matrix(x, u)?;
    Ok((0..d.rows())
        .map(|i| {
            let row = d.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// One Lloyd step in matrix form `U' = X eta_2(M)` with `M` the one-hot
/// assignment matrix. A center that receives no feature keeps its position.
///
/// Returns the new centers and the column-normalized assignment matrix; the
/// column of an empty cluster is zero.
pub fn lloyd_step(x: &Mat, u: &Mat) -> Result<(Mat, Mat)> {
    let labels = assign(x, u)?;
    let (p, k) = (x.cols(), u.cols());
    let mut counts = vec![0usize; k];
    for &c in &labels {
        counts[c] += 1;
    }
    let mut a = Mat::zeros(p, k);
    for (i, &c) in labels.iter().enumerate() {
        a[(i, c)] = 1.0 / counts[c] as f64;
    }
    let mut next = x.matmul(&a)?;
    for (j, &n) in counts.iter().enumerate() {
        if n == 0 {
            next.set_col(j, &u.col(j));
        }
    }
    Ok((next, a))
}

/// Run of Lloyd iterations with the distortion before and after every step.
#[derive(Debug, Clone, PartialEq)]
pub struct KmeansTrace {
    pub pooled: PooledSet,
    /// `J(U^t)` for `t = 0..=iters`.
    pub distortions: Vec<f64>,
}

/// `iters` Lloyd steps from the given initial centers.
pub fn kmeans_from(fm: &FeatureMap, init: &Mat, iters: usize) -> Result<KmeansTrace> {
    if iters == 0 {
        return Err(Error::contract("k-means needs at least one iteration"));
    }
    let x = fm.x();
    let mut u = init.clone();
    let mut distortions = vec![distortion(x, &u)?];
    let mut a = Mat::zeros(1, 1);
    for _ in 0..iters {
        (u, a) = lloyd_step(x, &u)?;
        distortions.push(distortion(x, &u)?);
    }
    let stochastic_cols = (0..a.cols()).all(|j| a.col(j).iter().any(|&v| v > 0.0));
    Ok(KmeansTrace {
        pooled: PooledSet {
            u,
            attention: Some(AttentionMatrix { a, stochastic_cols }),
        },
        distortions,
    })
}

/// `k` distinct column indices drawn by the seeded generator.
pub fn kmeans_init(p: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > p {
        return Err(Error::contract(format!("k-means needs 1 <= k <= p, got k = {k}, p = {p}")));
    }
    Ok(sample(&mut seeded(seed), p, k).into_vec())
}

/// k-means pooling from seeded data-column initialization.
pub fn kmeans_pool(fm: &FeatureMap, k: usize, iters: usize, seed: u64) -> Result<PooledSet> {
    let idx = kmeans_init(fm.p(), k, seed)?;
    let init = fm.x().select_cols(&idx)?;
    Ok(kmeans_from(fm, &init, iters)?.pooled)
}
