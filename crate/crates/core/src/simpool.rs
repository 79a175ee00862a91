//! SimPool: a GAP-initialized query attends over LayerNorm'd keys, and the
//! attention weights a generalized mean of the min-shifted values. Forward and
//! reverse-mode backward for `W_Q`, `W_K` and `X`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framework::{AttentionMatrix, FeatureMap, PooledSet};
use crate::matcore::{col_softmax, Mat, LN_EPS};
use crate::meanfam::GAMMA_CONV;
use crate::rng::init_weight;

pub const MAX_GAMMA: f64 = 100.0;

/// Learnable maps and hyperparameters of one SimPool layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPoolParams {
    pub w_q: Mat,
    pub w_k: Mat,
    pub gamma: f64,
    pub ln_eps: f64,
    pub layernorm: bool,
}

impl SimPoolParams {
    pub fn new(w_q: Mat, w_k: Mat, gamma: f64) -> Result<Self> {
        let d = w_q.rows();
        if w_q.shape() != (d, d) || w_k.shape() != (d, d) {
            return Err(Error::shape(
                "SimPoolParams::new",
                format!("W_Q {:?} and W_K {:?} must both be square of one size", w_q.shape(), w_k.shape()),
            ));
        }
        if !(gamma > 0.0 && gamma <= MAX_GAMMA) {
            return Err(Error::Range(format!("gamma must lie in (0, {MAX_GAMMA}], got {gamma}")));
        }
        w_q.ensure_finite("SimPoolParams::new")?;
        w_k.ensure_finite("SimPoolParams::new")?;
        Ok(Self {
            w_q,
            w_k,
            gamma,
            ln_eps: LN_EPS,
            layernorm: true,
        })
    }

    /// Scaled-normal weights with standard deviation `1 / sqrt(d)`.
    pub fn seeded(rng: &mut impl Rng, d: usize, gamma: f64) -> Result<Self> {
        let w_q = init_weight(rng, d, d);
        let w_k = init_weight(rng, d, d);
        Self::new(w_q, w_k, gamma)
    }

    pub fn identity(d: usize) -> Self {
        Self::new(Mat::identity(d), Mat::identity(d), GAMMA_CONV).expect("identity weights are valid")
    }

    pub fn with_gamma(self, gamma: f64) -> Result<Self> {
        let (layernorm, eps) = (self.layernorm, self.ln_eps);
        Ok(Self::new(self.w_q, self.w_k, gamma)?.with_ln(layernorm, eps))
    }

    pub fn with_ln(mut self, layernorm: bool, ln_eps: f64) -> Self {
        self.layernorm = layernorm;
        self.ln_eps = ln_eps;
        self
    }

    pub fn d(&self) -> usize {
        self.w_q.rows()
    }
}

/// Forward intermediates kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPoolCache {
    params: SimPoolParams,
    x: Mat,
    u0: Vec<f64>,
    /// `LN(X)`, or `X` when LayerNorm is off.
    xn: Mat,
    /// Per-column `1 / sqrt(var + eps)`.
    inv_std: Vec<f64>,
    q: Vec<f64>,
    k: Mat,
    logits: Vec<f64>,
    a: Vec<f64>,
    /// Row-major position of the first minimum of `xn`.
    argmin: (usize, usize),
    v: Mat,
    powered: Mat,
    s: Vec<f64>,
    u: Vec<f64>,
}

impl SimPoolCache {
    pub fn d(&self) -> usize {
        self.x.rows()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    pub fn params(&self) -> &SimPoolParams {
        &self.params
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn values(&self) -> &Mat {
        &self.v
    }

    pub fn argmin(&self) -> (usize, usize) {
        self.argmin
    }
}

/// Gradients of a scalar loss with respect to the parameters and input.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPoolGrads {
    pub d_wq: Mat,
    pub d_wk: Mat,
    pub d_x: Mat,
}

fn layernorm_with_stats(x: &Mat, eps: f64) -> (Mat, Vec<f64>) {
    let (d, p) = x.shape();
    let mut out = x.clone();
    let mut inv_std = vec![0.0; p];
    for j in 0..p {
        let col = x.col(j);
        let mean = col.iter().sum::<f64>() / d as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[j] = is;
        let normed: Vec<f64> = col.iter().map(|v| (v - mean) * is).collect();
        out.set_col(j, &normed);
    }
    (out, inv_std)
}

/// Pooled vector `u`, attention `a` and the cache for [`simpool_backward`].
pub fn simpool_forward(fm: &FeatureMap, params: &SimPoolParams) -> Result<(Vec<f64>, Vec<f64>, SimPoolCache)> {
    let x = fm.x();
    let (d, p) = x.shape();
    if d < 2 {
        return Err(Error::contract(format!("SimPool needs d >= 2, got d = {d}")));
    }
    if params.d() != d {
        return Err(Error::shape("simpool_forward", format!("weights for d = {}, features have d = {d}", params.d())));
    }
    x.ensure_finite("simpool_forward")?;

    let u0 = x.row_mean().into_vec();
    let (xn, inv_std) = if params.layernorm {
        layernorm_with_stats(x, params.ln_eps)
    } else {
        (x.clone(), vec![1.0; p])
    };
    let q = params.w_q.matvec(&u0)?;
    let k = params.w_k.matmul(&xn)?;
    let logits = k.transpose().matvec(&q)?;
    let a = col_softmax(&Mat::col_vector(&logits), (d as f64).sqrt())?.into_vec();

    let flat = xn.argmin();
    let argmin = (flat / p, flat % p);
    let v = xn.add_scalar(-xn.data()[flat]);
    let gamma = params.gamma;
    let powered = if gamma == 1.0 { v.clone() } else { v.powf(gamma) };
    let s = powered.matvec(&a)?;
    let u: Vec<f64> = if gamma == 1.0 {
        s.clone()
    } else {
        s.iter().map(|si| si.powf(1.0 / gamma)).collect()
    };
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "simpool_forward",
            detail: "pooled vector".into(),
        });
    }
    let cache = SimPoolCache {
        params: params.clone(),
        x: x.clone(),
        u0,
        xn,
        inv_std,
        q,
        k,
        logits,
        a: a.clone(),
        argmin,
        v,
        powered,
        s,
        u: u.clone(),
    };
    Ok((u, a, cache))
}

/// Forward pass packaged as a pooled set with its stochastic attention column.
pub fn simpool_pool(fm: &FeatureMap, params: &SimPoolParams) -> Result<PooledSet> {
    let (u, a, _) = simpool_forward(fm, params)?;
    Ok(PooledSet {
        u: Mat::col_vector(&u),
        attention: Some(AttentionMatrix {
            a: Mat::col_vector(&a),
            stochastic_cols: true,
        }),
    })
}

/// Reverse-mode gradients of `<du, u>`.
///
/// The global-min shift sends its gradient to the first minimal element in
/// row-major order.
pub fn simpool_backward(cache: &SimPoolCache, du: &[f64]) -> Result<SimPoolGrads> {
    let (d, p) = (cache.d(), cache.p());
    if du.len() != d || cache.u.len() != d || cache.a.len() != p {
        return Err(Error::contract(format!(
            "upstream gradient of length {} for a cache with d = {d}",
            du.len()
        )));
    }
    let params = &cache.params;
    let gamma = params.gamma;

    // u = s^(1/gamma), s = P a, P = V^gamma
    let ds: Vec<f64> = (0..d)
        .map(|i| {
            if gamma == 1.0 {
                du[i]
            } else if cache.s[i] > 0.0 {
                du[i] * cache.u[i] / (gamma * cache.s[i])
            } else {
                0.0
            }
        })
        .collect();
    let da = cache.powered.transpose().matvec(&ds)?;
    let mut dxn = Mat::zeros(d, p);
    let mut dmin = 0.0;
    for i in 0..d {
        for j in 0..p {
            let vij = cache.v[(i, j)];
            let dv_dp = if gamma == 1.0 {
                1.0
            } else if vij > 0.0 {
                gamma * vij.powf(gamma - 1.0)
            } else {
                0.0
            };
            let dv = ds[i] * cache.a[j] * dv_dp;
            dxn[(i, j)] = dv;
            dmin -= dv;
        }
    }
    dxn[cache.argmin] += dmin;

    // a = softmax(l / sqrt d)
    let mean_da: f64 = cache.a.iter().zip(&da).map(|(a, g)| a * g).sum();
    let inv_scale = 1.0 / (d as f64).sqrt();
    let dl: Vec<f64> = cache.a.iter().zip(&da).map(|(a, g)| a * (g - mean_da) * inv_scale).collect();

    // l = K^T q
    let dq = cache.k.matvec(&dl)?;
    let dk = outer(&cache.q, &dl);
    let d_wk = dk.matmul(&cache.xn.transpose())?;
    let dxn = dxn.add(&params.w_k.transpose().matmul(&dk)?)?;

    // q = W_Q u0
    let d_wq = outer(&dq, &cache.u0);
    let du0 = params.w_q.transpose().matvec(&dq)?;

    let mut d_x = if params.layernorm {
        layernorm_backward(&cache.xn, &cache.inv_std, &dxn)
    } else {
        dxn
    };
    for i in 0..d {
        let g = du0[i] / p as f64;
        for v in d_x.row_mut(i) {
            *v += g;
        }
    }
    Ok(SimPoolGrads { d_wq, d_wk, d_x })
}

fn outer(a: &[f64], b: &[f64]) -> Mat {
    let data = a.iter().flat_map(|&x| b.iter().map(move |&y| x * y)).collect();
    Mat::new(a.len(), b.len(), data).expect("outer product shape")
}

fn layernorm_backward(xn: &Mat, inv_std: &[f64], dxn: &Mat) -> Mat {
    let (d, p) = xn.shape();
    let mut out = Mat::zeros(d, p);
    for j in 0..p {
        let g = dxn.col(j);
        let xh = xn.col(j);
        let mean_g = g.iter().sum::<f64>() / d as f64;
        let mean_gx = g.iter().zip(&xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let col: Vec<f64> = g
            .iter()
            .zip(&xh)
            .map(|(gi, xi)| inv_std[j] * (gi - mean_g - xi * mean_gx))
            .collect();
        out.set_col(j, &col);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::framework::{run_pooling, PoolingSpec};
    use crate::rng::{normal_mat, seeded, uniform_mat};
    use proptest::prelude::*;

    fn sym() -> FeatureMap {
        FeatureMap::from_mat(Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0]]))
    }

    #[test]
    fn hand_trace_two_by_two() {
        let params = SimPoolParams::identity(2).with_gamma(1.0).unwrap().with_ln(true, 0.0);
        let (u, a, cache) = simpool_forward(&sym(), &params).unwrap();
        assert_eq!(cache.u0, vec![0.5, 0.5]);
        assert_eq!(cache.xn, Mat::from_rows(&[[1.0, -1.0], [-1.0, 1.0]]));
        assert_eq!(cache.q, vec![0.5, 0.5]);
        assert_eq!(cache.logits, vec![0.0, 0.0]);
        assert_eq!(a, vec![0.5, 0.5]);
        assert_eq!(cache.v, Mat::from_rows(&[[2.0, 0.0], [0.0, 2.0]]));
        assert_eq!(u, vec![1.0, 1.0]);
    }

    #[test]
    fn hand_trace_with_default_eps() {
        let params = SimPoolParams::identity(2).with_gamma(1.0).unwrap();
        let (u, _, _) = simpool_forward(&sym(), &params).unwrap();
        assert!(u.iter().all(|v| (v - 1.0).abs() < 1e-4));
    }

    #[test]
    fn gamma_changes_the_output() {
        let p2 = SimPoolParams::identity(2).with_ln(true, 0.0);
        let (u2, _, _) = simpool_forward(&sym(), &p2).unwrap();
        for v in &u2 {
            assert!((v - 2f64.sqrt()).abs() < 1e-12);
        }
        let p1 = p2.with_gamma(1.0).unwrap();
        assert_ne!(simpool_forward(&sym(), &p1).unwrap().0, u2);
    }

    #[test]
    fn single_channel_is_rejected() {
        let fm = FeatureMap::from_mat(Mat::from_rows(&[[1.0, 2.0]]));
        let params = SimPoolParams::new(Mat::identity(1), Mat::identity(1), 2.0).unwrap();
        assert!(matches!(simpool_forward(&fm, &params), Err(Error::Contract(_))));
    }

    #[test]
    fn gamma_range() {
        assert!(SimPoolParams::new(Mat::identity(2), Mat::identity(2), 0.0).is_err());
        assert!(SimPoolParams::new(Mat::identity(2), Mat::identity(2), 100.5).is_err());
        assert!(SimPoolParams::new(Mat::identity(2), Mat::identity(2), 100.0).is_ok());
    }

    #[test]
    fn identical_columns_give_uniform_attention() {
        let x = Mat::from_rows(&[[1.0, 1.0, 1.0, 1.0], [3.0, 3.0, 3.0, 3.0], [-2.0, -2.0, -2.0, -2.0]]);
        let params = SimPoolParams::seeded(&mut seeded(1), 3, 2.0).unwrap();
        let (_, a, _) = simpool_forward(&FeatureMap::from_mat(x), &params).unwrap();
        assert!(a.iter().all(|v| *v == 0.25));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = seeded(2);
        let params = SimPoolParams::seeded(&mut rng, 5, 1.25).unwrap();
        let fm = FeatureMap::from_mat(normal_mat(&mut rng, 5, 7, 1.0));
        let (_, _, cache) = simpool_forward(&fm, &params).unwrap();
        let g = simpool_backward(&cache, &[0.0; 5]).unwrap();
        assert!(g.d_wq.data().iter().chain(g.d_wk.data()).chain(g.d_x.data()).all(|v| *v == 0.0));
        assert!(matches!(simpool_backward(&cache, &[0.0; 4]), Err(Error::Contract(_))));
    }

    #[test]
    fn symmetric_directions_in_w_q() {
        // Perturbing W_Q along symmetric directions keeps the two logits equal,
        // so u does not move and the directional derivative vanishes.
        let params = SimPoolParams::identity(2).with_gamma(1.0).unwrap();
        let (_, _, cache) = simpool_forward(&sym(), &params).unwrap();
        let g = simpool_backward(&cache, &[1.0, 1.0]).unwrap();
        let dirs = [
            Mat::identity(2),
            Mat::from_rows(&[[0.0, 1.0], [1.0, 0.0]]),
            Mat::filled(2, 2, 1.0),
        ];
        let h = 1e-4;
        for e in dirs {
            let f = |w: Mat| {
                let p = SimPoolParams::new(w, Mat::identity(2), 1.0).unwrap();
                simpool_forward(&sym(), &p).unwrap().0.iter().sum::<f64>()
            };
            let fd = (f(Mat::identity(2).add(&e.scale(h)).unwrap()) - f(Mat::identity(2).sub(&e.scale(h)).unwrap())) / (2.0 * h);
            let analytic: f64 = g.d_wq.data().iter().zip(e.data()).map(|(a, b)| a * b).sum();
            assert!(fd.abs() < 1e-9 && analytic.abs() < 1e-12);
        }
    }

    #[test]
    fn engine_matches_direct() {
        let mut rng = seeded(3);
        for gamma in [1.0, 1.25, 2.0, 3.0] {
            for layernorm in [true, false] {
                let params = SimPoolParams::seeded(&mut rng, 6, gamma).unwrap().with_ln(layernorm, LN_EPS);
                let fm = FeatureMap::from_mat(uniform_mat(&mut rng, 6, 9, 0.0, 1.0));
                let direct = simpool_pool(&fm, &params).unwrap();
                let spec = PoolingSpec::simpool(&params.w_q, &params.w_k, gamma, layernorm).unwrap();
                let eng = run_pooling(&spec, &fm).unwrap();
                assert!(eng.u.max_abs_diff(&direct.u).unwrap() < 1e-12);
                let (ea, da) = (eng.attention.unwrap().a, direct.attention.unwrap().a);
                assert!(ea.max_abs_diff(&da).unwrap() < 1e-12);
            }
        }
    }

    fn instance(seed: u64, d: usize, p: usize) -> (FeatureMap, SimPoolParams) {
        let mut rng = seeded(seed);
        let params = SimPoolParams::seeded(&mut rng, d, 2.0).unwrap();
        (FeatureMap::from_mat(normal_mat(&mut rng, d, p, 1.0)), params)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn attention_sums_to_one(seed in any::<u64>(), d in 2usize..8, p in 1usize..12) {
            let (fm, params) = instance(seed, d, p);
            let (u, a, _) = simpool_forward(&fm, &params).unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(u.iter().all(|v| v.is_finite()));
        }

        #[test]
        fn logit_shift_leaves_attention(seed in any::<u64>(), c in -1e3f64..1e3) {
            let (fm, params) = instance(seed, 4, 6);
            let (_, a, cache) = simpool_forward(&fm, &params).unwrap();
            let shifted: Vec<f64> = cache.logits().iter().map(|l| l + c).collect();
            let scale = 2.0;
            let b = col_softmax(&Mat::col_vector(&shifted), scale).unwrap().into_vec();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn linear_pool_stays_within_row_range(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let params = SimPoolParams::seeded(&mut rng, 5, 1.0).unwrap();
            let fm = FeatureMap::from_mat(uniform_mat(&mut rng, 5, 8, 0.0, 1.0));
            let (u, _, cache) = simpool_forward(&fm, &params).unwrap();
            for (i, ui) in u.iter().enumerate() {
                let row = cache.values().row(i);
                let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo - 1e-12 <= *ui && *ui <= hi + 1e-12);
            }
        }

        #[test]
        fn permutation_equivariance(seed in any::<u64>(), shift in 1usize..7) {
            let (fm, params) = instance(seed, 4, 7);
            let perm: Vec<usize> = (0..7).map(|j| (j + shift) % 7).collect();
            let permuted = FeatureMap::from_mat(fm.x().select_cols(&perm).unwrap());
            let (u1, a1, _) = simpool_forward(&fm, &params).unwrap();
            let (u2, a2, _) = simpool_forward(&permuted, &params).unwrap();
            for (x, y) in u1.iter().zip(&u2) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            for (j, &src) in perm.iter().enumerate() {
                prop_assert!((a2[j] - a1[src]).abs() <= 1e-12);
            }
        }
    }
}
