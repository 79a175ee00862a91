//! The `f_alpha` pooling-function family and the attention-weighted
//! generalized mean `Z = f^-1(f(V) A)` built on it.
//!
//! `f_alpha(x) = x^gamma` with `gamma = (1 - alpha) / 2`, and `ln x` at
//! `alpha = 1`. Named means: `alpha = -inf` max, `-3` RMS, `-1` arithmetic,
//! `1` geometric, `3` harmonic, `+inf` min.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::Mat;

/// Values below this floor are clamped before negative or logarithmic powers.
pub const CLAMP_FLOOR: f64 = 1e-12;

/// Smallest `|gamma|` accepted by the power branch.
pub const MIN_ABS_GAMMA: f64 = 1e-9;

/// Default exponent for convolutional-style features.
pub const GAMMA_CONV: f64 = 2.0;
/// Default exponent for transformer-style features.
pub const GAMMA_TRANSFORMER: f64 = 1.25;

/// Evaluation branch of an [`AlphaParam`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// `x^gamma`, `gamma != 0`.
    Power,
    /// `ln x` (`alpha = 1`).
    Log,
    /// Limit `alpha -> -inf`.
    Max,
    /// Limit `alpha -> +inf`.
    Min,
}

/// Parameter of the pooling function `f_alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaParam {
    alpha: f64,
    gamma: f64,
    branch: Branch,
}

impl AlphaParam {
    pub fn from_alpha(alpha: f64) -> Result<Self> {
        if alpha.is_nan() {
            return Err(Error::Range("alpha is NaN".into()));
        }
        if alpha == f64::NEG_INFINITY {
            return Ok(Self::max());
        }
        if alpha == f64::INFINITY {
            return Ok(Self::min());
        }
        if alpha == 1.0 {
            return Ok(Self::log());
        }
        let gamma = (1.0 - alpha) / 2.0;
        Self::check_gamma(gamma)?;
        Ok(Self {
            alpha,
            gamma,
            branch: Branch::Power,
        })
    }

    pub fn from_gamma(gamma: f64) -> Result<Self> {
        if gamma.is_nan() {
            return Err(Error::Range("gamma is NaN".into()));
        }
        if gamma == f64::INFINITY {
            return Ok(Self::max());
        }
        if gamma == f64::NEG_INFINITY {
            return Ok(Self::min());
        }
        Self::check_gamma(gamma)?;
        Ok(Self {
            alpha: 1.0 - 2.0 * gamma,
            gamma,
            branch: Branch::Power,
        })
    }

    /// Geometric mean, `alpha = 1`.
    pub fn log() -> Self {
        Self {
            alpha: 1.0,
            gamma: 0.0,
            branch: Branch::Log,
        }
    }

    pub fn max() -> Self {
        Self {
            alpha: f64::NEG_INFINITY,
            gamma: f64::INFINITY,
            branch: Branch::Max,
        }
    }

    pub fn min() -> Self {
        Self {
            alpha: f64::INFINITY,
            gamma: f64::NEG_INFINITY,
            branch: Branch::Min,
        }
    }

    /// Arithmetic mean, `alpha = -1`.
    pub fn arithmetic() -> Self {
        Self {
            alpha: -1.0,
            gamma: 1.0,
            branch: Branch::Power,
        }
    }

    fn check_gamma(gamma: f64) -> Result<()> {
        if gamma.abs() < MIN_ABS_GAMMA {
            return Err(Error::Range(format!(
                "|gamma| = {:e} is below {MIN_ABS_GAMMA:e}; use the logarithmic branch (alpha = 1)",
                gamma.abs()
            )));
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `(1 - alpha) / 2`; `0` on the log branch and infinite for the max/min limits.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    /// `f_alpha(x)`. Defined for the power and log branches only.
    pub fn f(&self, x: f64) -> f64 {
        match self.branch {
            Branch::Power if self.gamma > 0.0 => x.powf(self.gamma),
            Branch::Power => x.max(CLAMP_FLOOR).powf(self.gamma),
            Branch::Log => x.max(CLAMP_FLOOR).ln(),
            Branch::Max | Branch::Min => f64::NAN,
        }
    }

    /// `f_alpha^-1(y)`.
    pub fn f_inv(&self, y: f64) -> f64 {
        match self.branch {
            Branch::Power => y.powf(1.0 / self.gamma),
            Branch::Log => y.exp(),
            Branch::Max | Branch::Min => f64::NAN,
        }
    }
}

/// `p x 1` column of `1/p`.
pub fn uniform_weights(p: usize) -> Mat {
    Mat::filled(p, 1, 1.0 / p as f64)
}

fn check_weights(v: &Mat, a: &Mat, op: &'static str) -> Result<()> {
    if v.cols() != a.rows() {
        return Err(Error::shape(
            op,
            format!("values {}x{} with weights {}x{}", v.rows(), v.cols(), a.rows(), a.cols()),
        ));
    }
    v.ensure_finite(op)?;
    a.ensure_finite(op)?;
    if let Some(&w) = a.data().iter().find(|&&w| w < 0.0) {
        return Err(Error::contract(format!("{op}: negative weight {w}")));
    }
    Ok(())
}

/// Attention-weighted generalized mean `((V^gamma) A)^(1/gamma)`, or
/// `exp(ln(V) A)` on the log branch, elementwise on a `d x p` value matrix.
///
/// Power branches factor out the row extreme before exponentiation, so large
/// `|gamma|` does not overflow. The max/min limits range over the support of
/// each attention column.
pub fn weighted_generalized_mean(v: &Mat, a: &Mat, alpha: AlphaParam) -> Result<Mat> {
    check_weights(v, a, "weighted_generalized_mean")?;
    let linear = alpha.branch == Branch::Power && alpha.gamma == 1.0;
    let extreme = matches!(alpha.branch, Branch::Max | Branch::Min);
    if !linear && !extreme {
        if let Some(&x) = v.data().iter().find(|&&x| x < 0.0) {
            return Err(Error::contract(format!(
                "weighted_generalized_mean requires nonnegative values, found {x}"
            )));
        }
    }
    let d = v.rows();
    let k = a.cols();
    let mut out = Mat::zeros(d, k);
    for j in 0..k {
        let w = a.col(j);
        for i in 0..d {
            let row = v.row(i);
            out[(i, j)] = match alpha.branch {
                Branch::Power if linear => row.iter().zip(&w).map(|(x, wl)| x * wl).sum(),
                Branch::Power => power_mean(row, &w, alpha.gamma),
                Branch::Log => {
                    let s: f64 = row
                        .iter()
                        .zip(&w)
                        .map(|(&x, &wl)| wl * x.max(CLAMP_FLOOR).ln())
                        .sum();
                    s.exp()
                }
                Branch::Max => support_extreme(row, &w, f64::max, f64::NEG_INFINITY, j)?,
                Branch::Min => support_extreme(row, &w, f64::min, f64::INFINITY, j)?,
            };
        }
    }
    out.ensure_finite("weighted_generalized_mean")?;
    Ok(out)
}

fn power_mean(row: &[f64], w: &[f64], gamma: f64) -> f64 {
    if gamma > 0.0 {
        let m = row.iter().copied().fold(0.0, f64::max);
        if m == 0.0 {
            return 0.0;
        }
        let s: f64 = row.iter().zip(w).map(|(&x, &wl)| wl * (x / m).powf(gamma)).sum();
        m * s.powf(1.0 / gamma)
    } else {
        let m = row
            .iter()
            .map(|&x| x.max(CLAMP_FLOOR))
            .fold(f64::INFINITY, f64::min);
        let s: f64 = row
            .iter()
            .zip(w)
            .map(|(&x, &wl)| wl * (x.max(CLAMP_FLOOR) / m).powf(gamma))
            .sum();
        m * s.powf(1.0 / gamma)
    }
}

fn support_extreme(
    row: &[f64],
    w: &[f64],
    pick: fn(f64, f64) -> f64,
    start: f64,
    col: usize,
) -> Result<f64> {
    let r = row
        .iter()
        .zip(w)
        .filter(|(_, &wl)| wl > 0.0)
        .fold(start, |acc, (&x, _)| pick(acc, x));
    if r.is_infinite() {
        return Err(Error::DegenerateMass {
            op: "weighted_generalized_mean",
            axis: "attention column",
            index: col,
        });
    }
    Ok(r)
}

/// Direction of the limit taken by [`approx_extreme`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extreme {
    Max,
    Min,
}

/// Uniform power mean with a large exponent, approaching the row max (or min).
///
/// The result is monotone in the exponent and never exceeds the true extreme;
/// for `p` entries it is within a factor `p^(-1/gamma)` of the maximum.
pub fn approx_extreme(v: &Mat, gamma_large: f64, extreme: Extreme) -> Result<Mat> {
    if !(gamma_large >= 10.0) || !gamma_large.is_finite() {
        return Err(Error::Range(format!(
            "approx_extreme needs a finite exponent >= 10, got {gamma_large}"
        )));
    }
    let gamma = match extreme {
        Extreme::Max => gamma_large,
        Extreme::Min => -gamma_large,
    };
    weighted_generalized_mean(v, &uniform_weights(v.cols()), AlphaParam::from_gamma(gamma)?)
}

/// Log-sum-exp pooling `(1/r) ln(exp(r V) a)`, with the row extreme factored out.
pub fn lse_pool(v: &Mat, a: &Mat, r: f64) -> Result<Mat> {
    if !(r.abs() >= MIN_ABS_GAMMA) || !r.is_finite() {
        return Err(Error::contract(format!("lse scale r must satisfy |r| >= 1e-9, got {r}")));
    }
    check_weights(v, a, "lse_pool")?;
    let d = v.rows();
    let k = a.cols();
    let mut out = Mat::zeros(d, k);
    for j in 0..k {
        let w = a.col(j);
        for i in 0..d {
            let row = v.row(i);
            let m = row.iter().map(|&x| r * x).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().zip(&w).map(|(&x, &wl)| wl * (r * x - m).exp()).sum();
            out[(i, j)] = (m + s.ln()) / r;
        }
    }
    out.ensure_finite("lse_pool")?;
    Ok(out)
}
