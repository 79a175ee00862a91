use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framework::{AttentionMatrix, FeatureMap, PooledSet};
use crate::matcore::{jacobi_eigh, sq_dist, Mat};

/// Smallest kernel entry treated as nonzero.
pub const KERNEL_FLOOR: f64 = 1e-300;
/// Eigenvalue floor of the Nystrom inverse square root.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Entropic optimal-transport solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornParams {
    pub epsilon: f64,
    /// Tolerance on both marginals, in max norm.
    pub tol: f64,
    pub max_iter: usize,
}

impl SinkhornParams {
    pub fn new(epsilon: f64) -> Result<Self> {
        let p = Self {
            epsilon,
            tol: 1e-9,
            max_iter: 1000,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Range(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::Range("Sinkhorn tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }
}

/// Transport plan with convergence diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornSolution {
    pub plan: Mat,
    pub iterations: usize,
    /// Largest marginal violation of the returned plan.
    pub residual: f64,
}

/// Entropic transport plan for `cost` (`p x k`) with row marginal `1/p` and
/// column marginal `1/k`, by alternating scaling of `exp(-C / epsilon)`.
///
/// Each sweep is preceded by a damped Newton step on the scaling vectors,
/// kept only when it lowers the marginal residual. Small `epsilon` makes the
/// plain sweeps crawl once the plan splits into weakly coupled blocks.
pub fn sinkhorn_solve(cost: &Mat, params: &SinkhornParams) -> Result<SinkhornSolution> {
    params.validate()?;
    cost.ensure_finite("sinkhorn")?;
    let (p, k) = cost.shape();
    let (rp, ck) = (1.0 / p as f64, 1.0 / k as f64);

    // Subtracting the row minimum rescales rows only, which the row scaling absorbs.
    let mut kernel = Mat::zeros(p, k);
    for i in 0..p {
        let row = cost.row(i);
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        for (dst, &c) in kernel.row_mut(i).iter_mut().zip(row) {
            *dst = (-(c - lo) / params.epsilon).exp();
        }
    }
    for j in 0..k {
        if (0..p).all(|i| kernel[(i, j)] < KERNEL_FLOOR) {
            return Err(Error::EpsilonTooSmall {
                epsilon: params.epsilon,
                axis: "column",
                index: j,
            });
        }
    }

    let mut u = vec![1.0; p];
    let mut v = vec![1.0; k];
    let mut residual = f64::INFINITY;
    let mut plan: Option<Mat> = None;
    for it in 1..=params.max_iter {
        if let Some(prev) = &plan {
            newton_step(&kernel, prev, residual, &mut u, &mut v);
        }
        for i in 0..p {
            let kv: f64 = kernel.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
            u[i] = rp / kv;
        }
        let mut col = vec![0.0; k];
        for i in 0..p {
            for (c, &kij) in col.iter_mut().zip(kernel.row(i)) {
                *c += kij * u[i];
            }
        }
        for j in 0..k {
            v[j] = ck / col[j];
        }
        let current = scaled(&kernel, &u, &v);
        residual = marginal_residual(&current);
        if residual <= params.tol {
            current.ensure_finite("sinkhorn")?;
            return Ok(SinkhornSolution {
                plan: current,
                iterations: it,
                residual,
            });
        }
        plan = Some(current);
    }
    Err(Error::Convergence {
        what: "sinkhorn",
        iterations: params.max_iter,
        residual,
    })
}

/// Plan only; see [`sinkhorn_solve`].
pub fn sinkhorn(cost: &Mat, params: &SinkhornParams) -> Result<Mat> {
    sinkhorn_solve(cost, params).map(|s| s.plan)
}

/// Levenberg shift of the reduced system, relative to the column marginal.
const NEWTON_DAMPING: f64 = 1e-10;
const MAX_HALVINGS: usize = 40;

/// Newton step on `(ln u, ln v)` for the marginal equations, with the row
/// update eliminated and the last column fixed. Backtracks until the residual
/// drops; `u` and `v` are left untouched otherwise.
fn newton_step(kernel: &Mat, plan: &Mat, residual: f64, u: &mut [f64], v: &mut [f64]) -> Option<()> {
    let (p, k) = plan.shape();
    let rows: Vec<f64> = (0..p).map(|i| plan.row(i).iter().sum()).collect();
    if rows.iter().any(|&r| !(r > 0.0)) {
        return None;
    }
    let mut cols = vec![0.0; k];
    for i in 0..p {
        for (c, &x) in cols.iter_mut().zip(plan.row(i)) {
            *c += x;
        }
    }
    let e_row: Vec<f64> = rows.iter().map(|r| r - 1.0 / p as f64).collect();
    let e_col: Vec<f64> = cols.iter().map(|c| c - 1.0 / k as f64).collect();

    // M = P^T diag(rows)^-1 P has row sums equal to `cols`, so the Schur
    // complement diag(cols) - M is the graph Laplacian of M.
    let n = k - 1;
    let mut m = Mat::zeros(k, k);
    for i in 0..p {
        let row = plan.row(i);
        for j in 0..k {
            let w = row[j] / rows[i];
            if w != 0.0 {
                for l in 0..k {
                    m[(j, l)] += w * row[l];
                }
            }
        }
    }
    let mut schur = Mat::zeros(n, n);
    for j in 0..n {
        let mut off = 0.0;
        for l in 0..k {
            if l != j {
                off += m[(j, l)];
                if l < n {
                    schur[(j, l)] = -m[(j, l)];
                }
            }
        }
        schur[(j, j)] = off + NEWTON_DAMPING / k as f64;
    }
    let rhs: Vec<f64> = (0..n)
        .map(|j| -e_col[j] + (0..p).map(|i| plan[(i, j)] / rows[i] * e_row[i]).sum::<f64>())
        .collect();
    let mut db = cholesky_solve(schur, rhs)?;
    db.push(0.0);
    let da: Vec<f64> = (0..p)
        .map(|i| (-e_row[i] - plan.row(i).iter().zip(&db).map(|(x, d)| x * d).sum::<f64>()) / rows[i])
        .collect();

    let mut t = 1.0;
    for _ in 0..MAX_HALVINGS {
        let nu: Vec<f64> = u.iter().zip(&da).map(|(x, d)| x * (t * d).exp()).collect();
        let nv: Vec<f64> = v.iter().zip(&db).map(|(x, d)| x * (t * d).exp()).collect();
        if marginal_residual(&scaled(kernel, &nu, &nv)) < residual {
            u.copy_from_slice(&nu);
            v.copy_from_slice(&nv);
            return Some(());
        }
        t *= 0.5;
    }
    None
}

/// Solves `a x = b` for symmetric positive definite `a`.
fn cholesky_solve(mut a: Mat, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    if !b.iter().all(|x| x.is_finite()) {
        return None;
    }
    for j in 0..n {
        let d = a[(j, j)] - (0..j).map(|l| a[(j, l)] * a[(j, l)]).sum::<f64>();
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        a[(j, j)] = d;
        for i in j + 1..n {
            let s = a[(i, j)] - (0..j).map(|l| a[(i, l)] * a[(j, l)]).sum::<f64>();
            a[(i, j)] = s / d;
        }
    }
    for i in 0..n {
        b[i] = (b[i] - (0..i).map(|l| a[(i, l)] * b[l]).sum::<f64>()) / a[(i, i)];
    }
    for i in (0..n).rev() {
        b[i] = (b[i] - (i + 1..n).map(|l| a[(l, i)] * b[l]).sum::<f64>()) / a[(i, i)];
    }
    Some(b)
}

fn scaled(kernel: &Mat, u: &[f64], v: &[f64]) -> Mat {
    let mut plan = kernel.clone();
    for (i, &ui) in u.iter().enumerate() {
        for (x, &vj) in plan.row_mut(i).iter_mut().zip(v) {
            *x *= ui * vj;
        }
    }
    plan
}

/// `max(|P 1 - 1/p|, |P^T 1 - 1/k|)` in max norm.
pub fn marginal_residual(plan: &Mat) -> f64 {
    let (p, k) = plan.shape();
    let mut worst: f64 = 0.0;
    for i in 0..p {
        let s: f64 = plan.row(i).iter().sum();
        worst = worst.max((s - 1.0 / p as f64).abs());
    }
    for j in 0..k {
        let s: f64 = (0..p).map(|i| plan[(i, j)]).sum();
        worst = worst.max((s - 1.0 / k as f64).abs());
    }
    worst
}

/// Squared Euclidean distances between columns of `x` (`d x p`) and `u` (`d x k`), `p x k`.
pub fn sq_dist_matrix(x: &Mat, u: &Mat) -> Result<Mat> {
    if x.rows() != u.rows() {
        return Err(Error::shape(
            "sq_dist_matrix",
            format!("features of dimension {} vs centers of dimension {}", x.rows(), u.rows()),
        ));
    }
    let (xt, ut) = (x.transpose(), u.transpose());
    let mut d = Mat::zeros(x.cols(), u.cols());
    for i in 0..x.cols() {
        for j in 0..u.cols() {
            d[(i, j)] = sq_dist(xt.row(i), ut.row(j));
        }
    }
    Ok(d)
}

/// Nystrom feature map `psi(x) = M^-1/2 k(anchors, x)` of a Gaussian kernel
/// `k(a, b) = exp(-|a - b|^2 / (2 sigma^2))`, with `M = k(anchors, anchors)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NystromMap {
    anchors: Mat,
    sigma: f64,
    inv_sqrt: Mat,
}

impl NystromMap {
    pub fn new(anchors: &Mat, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Range(format!("kernel width sigma must be positive, got {sigma}")));
        }
        let gram = gaussian_kernel(anchors, anchors, sigma)?;
        let (vals, vecs) = jacobi_eigh(&gram)?;
        let top = vals.last().copied().unwrap_or(0.0).max(1.0);
        if let Some(&bad) = vals.iter().find(|&&l| l < -1e-8 * top) {
            return Err(Error::NonFinite {
                op: "nystrom",
                detail: format!("kernel matrix is not positive semidefinite (eigenvalue {bad:e})"),
            });
        }
        let scale: Vec<f64> = vals.iter().map(|&l| 1.0 / l.max(EIGEN_FLOOR).sqrt()).collect();
        let inv_sqrt = vecs.diag_right(&scale)?.matmul(&vecs.transpose())?;
        Ok(Self {
            anchors: anchors.clone(),
            sigma,
            inv_sqrt,
        })
    }

    pub fn anchors(&self) -> &Mat {
        &self.anchors
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Embeds every column of `x`, returning `k x p`.
    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        self.inv_sqrt.matmul(&gaussian_kernel(&self.anchors, x, self.sigma)?)
    }
}

/// `k(a_i, b_j)` for columns of `a` and `b`.
pub fn gaussian_kernel(a: &Mat, b: &Mat, sigma: f64) -> Result<Mat> {
    let d = sq_dist_matrix(a, b)?;
    Ok(d.map(|v| (-v / (2.0 * sigma * sigma)).exp()))
}

/// Embedding applied to features before transport pooling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psi {
    Identity,
    /// Gaussian Nystrom embedding with the given kernel width, anchored at the references.
    Nystrom { sigma: f64 },
}

/// Optimal-transport pooling onto fixed references: `U = k psi(X) P*`.
///
/// The factor `k` turns each plan column (mass `1/k`) into weights summing to one,
/// so every output column is a mean of embedded features.
pub fn otk_pool(fm: &FeatureMap, anchors: &Mat, params: &SinkhornParams, psi: Psi) -> Result<PooledSet> {
    let cost = sq_dist_matrix(fm.x(), anchors)?;
    let plan = sinkhorn(&cost, params)?;
    let a = plan.scale(anchors.cols() as f64);
    let features = match psi {
        Psi::Identity => fm.x().clone(),
        Psi::Nystrom { sigma } => NystromMap::new(anchors, sigma)?.apply(fm.x())?,
    };
    let u = features.matmul(&a)?;
    Ok(PooledSet {
        u,
        attention: Some(AttentionMatrix {
            a,
            stochastic_cols: true,
        }),
    })
}
