//! Non-iterative single-vector poolers: GAP, max, GeM, log-sum-exp and HOW.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framework::FeatureMap;
use crate::matcore::{l2_normalize, Mat};
use crate::meanfam::{lse_pool, uniform_weights, weighted_generalized_mean, AlphaParam};

/// Column mean of `X`.
pub fn gap(fm: &FeatureMap) -> Vec<f64> {
    fm.x().row_mean().into_vec()
}

/// Row-wise maximum of `X`.
pub fn max_pool(fm: &FeatureMap) -> Vec<f64> {
    (0..fm.d())
        .map(|i| fm.x().row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Power mean with exponent `gamma` over positions. Needs `X >= 0`.
pub fn gem(fm: &FeatureMap, gamma: f64) -> Result<Vec<f64>> {
    let alpha = AlphaParam::from_gamma(gamma)?;
    Ok(weighted_generalized_mean(fm.x(), &uniform_weights(fm.p()), alpha)?.into_vec())
}

/// `(1/r) ln(mean_j exp(r x_j))` per channel.
pub fn lse(fm: &FeatureMap, r: f64) -> Result<Vec<f64>> {
    Ok(lse_pool(fm.x(), &uniform_weights(fm.p()), r)?.into_vec())
}

/// Fixed value transform of HOW: centering then projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HowConfig {
    pub centering: Vec<f64>,
    pub projection: Mat,
}

impl HowConfig {
    /// Zero centering and identity projection.
    pub fn identity(d: usize) -> Self {
        Self {
            centering: vec![0.0; d],
            projection: Mat::identity(d),
        }
    }

    pub fn new(centering: Vec<f64>, projection: Mat) -> Result<Self> {
        if projection.cols() != centering.len() {
            return Err(Error::shape(
                "HowConfig::new",
                format!(
                    "projection {}x{} with centering of {}",
                    projection.rows(),
                    projection.cols(),
                    centering.len()
                ),
            ));
        }
        Ok(Self {
            centering,
            projection,
        })
    }
}

/// `3 x 3` local average on the `W x H` grid, same size output. Each cell
/// averages the neighbours that fall inside the grid.
pub fn avg3(x: &Mat, width: usize, height: usize) -> Result<Mat> {
    if width * height != x.cols() {
        return Err(Error::shape(
            "avg3",
            format!("grid {width}x{height} for p = {}", x.cols()),
        ));
    }
    let mut out = Mat::zeros(x.rows(), x.cols());
    for c in 0..x.rows() {
        let row = x.row(c);
        for y in 0..height {
            for xx in 0..width {
                let mut sum = 0.0;
                let mut n = 0usize;
                for ny in y.saturating_sub(1)..=(y + 1).min(height - 1) {
                    for nx in xx.saturating_sub(1)..=(xx + 1).min(width - 1) {
                        sum += row[ny * width + nx];
                        n += 1;
                    }
                }
                out[(c, y * width + xx)] = sum / n as f64;
            }
        }
    }
    Ok(out)
}

/// HOW value matrix `projection * avg3(X - centering)`.
pub fn how_value(fm: &FeatureMap, cfg: &HowConfig) -> Result<Mat> {
    if cfg.centering.len() != fm.d() {
        return Err(Error::shape(
            "how",
            format!("centering of {} for d = {}", cfg.centering.len(), fm.d()),
        ));
    }
    let mut c = fm.x().clone();
    for (i, &ci) in cfg.centering.iter().enumerate() {
        for v in c.row_mut(i) {
            *v -= ci;
        }
    }
    cfg.projection.matmul(&avg3(&c, fm.width(), fm.height())?)
}

/// HOW pooling: attention from squared feature norms, locally averaged
/// values, `l2`-normalized output.
pub fn how(fm: &FeatureMap, cfg: &HowConfig) -> Result<Vec<f64>> {
    let v = how_value(fm, cfg)?;
    let xt = fm.x().transpose();
    let a: Vec<f64> = (0..fm.p()).map(|j| xt.row(j).iter().map(|x| x * x).sum()).collect();
    let z = v.matvec(&a)?;
    l2_normalize(&z).map_err(|_| Error::DegenerateMass {
        op: "how",
        axis: "pooled vector",
        index: 0,
    })
}
