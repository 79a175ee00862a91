//! Central-difference gradient oracle and its comparison against SimPool's
//! analytic backward pass.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::framework::FeatureMap;
use crate::matcore::Mat;
use crate::rng::{normal_mat, seeded};
use crate::simpool::{simpool_backward, simpool_forward, SimPoolParams};

pub const MIN_STEP: f64 = 1e-8;
pub const MAX_STEP: f64 = 1e-2;
const REL_FLOOR: f64 = 1e-12;

/// Agreement between an analytic and a numerical gradient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// `(row, col)` of the worst coordinate.
    pub worst: (usize, usize),
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.3e}\t{:.3e}\t({}, {})",
            self.name, self.max_rel_error, self.mean_rel_error, self.worst.0, self.worst.1
        )
    }
}

/// `(f(theta + h e) - f(theta - h e)) / 2h` for every coordinate.
pub fn central_diff(f: impl Fn(&Mat) -> Result<f64>, theta: &Mat, h: f64) -> Result<Mat> {
    if !(MIN_STEP..=MAX_STEP).contains(&h) {
        return Err(Error::Range(format!("step h = {h} outside [{MIN_STEP}, {MAX_STEP}]")));
    }
    let mut probe = theta.clone();
    let mut grad = Mat::zeros(theta.rows(), theta.cols());
    for idx in 0..theta.data().len() {
        let orig = theta.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[idx] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[idx] = orig;
        let g = (up - down) / (2.0 * h);
        if !g.is_finite() {
            return Err(Error::NonFinite {
                op: "central_diff",
                detail: format!("coordinate ({}, {})", idx / theta.cols(), idx % theta.cols()),
            });
        }
        grad.data_mut()[idx] = g;
    }
    Ok(grad)
}

fn elementwise_rel(g1: &Mat, g2: &Mat) -> Result<Vec<f64>> {
    if g1.shape() != g2.shape() {
        return Err(Error::shape(
            "rel_error",
            format!("{:?} against {:?}", g1.shape(), g2.shape()),
        ));
    }
    Ok(g1
        .data()
        .iter()
        .zip(g2.data())
        .map(|(a, b)| (a - b).abs() / REL_FLOOR.max(a.abs() + b.abs()))
        .collect())
}

/// `max_i |g1 - g2| / max(1e-12, |g1| + |g2|)`.
pub fn rel_error(g1: &Mat, g2: &Mat) -> Result<f64> {
    Ok(elementwise_rel(g1, g2)?.into_iter().fold(0.0, f64::max))
}

pub fn compare(name: &str, analytic: &Mat, numeric: &Mat) -> Result<GradReport> {
    let errs = elementwise_rel(analytic, numeric)?;
    let (mut worst, mut max) = (0, 0.0);
    for (i, &e) in errs.iter().enumerate() {
        if e > max {
            (worst, max) = (i, e);
        }
    }
    let cols = analytic.cols().max(1);
    Ok(GradReport {
        name: name.to_string(),
        max_rel_error: max,
        mean_rel_error: if errs.is_empty() { 0.0 } else { errs.iter().sum::<f64>() / errs.len() as f64 },
        worst: (worst / cols, worst % cols),
    })
}

/// Checks the SimPool backward pass for `W_Q`, `W_K` and `X` on the loss `<du, u>`.
pub fn check_simpool(fm: &FeatureMap, params: &SimPoolParams, du: &[f64], h: f64) -> Result<Vec<GradReport>> {
    let (_, _, cache) = simpool_forward(fm, params)?;
    let grads = simpool_backward(&cache, du)?;
    let loss = |fm: &FeatureMap, p: &SimPoolParams| -> Result<f64> {
        let (u, _, _) = simpool_forward(fm, p)?;
        Ok(u.iter().zip(du).map(|(a, b)| a * b).sum())
    };
    let n_wq = central_diff(
        |w| {
            let mut p = params.clone();
            p.w_q = w.clone();
            loss(fm, &p)
        },
        &params.w_q,
        h,
    )?;
    let n_wk = central_diff(
        |w| {
            let mut p = params.clone();
            p.w_k = w.clone();
            loss(fm, &p)
        },
        &params.w_k,
        h,
    )?;
    let n_x = central_diff(|x| loss(&fm.with_features(x.clone())?, params), fm.x(), h)?;
    Ok(vec![
        compare("W_Q", &grads.d_wq, &n_wq)?,
        compare("W_K", &grads.d_wk, &n_wk)?,
        compare("X", &grads.d_x, &n_x)?,
    ])
}

/// Randomized SimPool gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPoolCheck {
    pub d: usize,
    pub p: usize,
    pub gamma: f64,
    pub h: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SimPoolCheck {
    fn default() -> Self {
        Self {
            d: 8,
            p: 12,
            gamma: 2.0,
            h: 1e-4,
            trials: 20,
            seed: 0,
        }
    }
}

/// Smallest gap kept between the minimum of `LN(X)` and every other entry, so
/// that the min-shift is differentiable throughout the difference stencil.
pub const TIE_MARGIN: f64 = 0.05;

/// One seeded instance: weights, features and upstream gradient. Features are
/// redrawn until the minimum entry of the normalized map is isolated.
pub fn simpool_instance(d: usize, p: usize, gamma: f64, seed: u64) -> Result<(FeatureMap, SimPoolParams, Vec<f64>)> {
    let mut rng = seeded(seed);
    let params = SimPoolParams::seeded(&mut rng, d, gamma)?;
    let du = normal_mat(&mut rng, d, 1, 1.0).into_vec();
    loop {
        let fm = FeatureMap::from_mat(normal_mat(&mut rng, d, p, 1.0));
        let (_, _, cache) = simpool_forward(&fm, &params)?;
        let (i0, j0) = cache.argmin();
        let v = cache.values();
        let isolated = (0..d).all(|i| (0..p).all(|j| (i, j) == (i0, j0) || v[(i, j)] >= TIE_MARGIN));
        if isolated || d * p == 1 {
            return Ok((fm, params, du));
        }
    }
}

/// Reports for every trial, three per trial.
pub fn run_simpool_check(cfg: &SimPoolCheck) -> Result<Vec<GradReport>> {
    let mut out = Vec::with_capacity(3 * cfg.trials);
    for t in 0..cfg.trials {
        let (fm, params, du) = simpool_instance(cfg.d, cfg.p, cfg.gamma, cfg.seed.wrapping_add(t as u64))?;
        out.extend(check_simpool(&fm, &params, &du, cfg.h)?);
    }
    Ok(out)
}
