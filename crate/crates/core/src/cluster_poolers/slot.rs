use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framework::{AttentionMatrix, FeatureMap, PooledSet};
use crate::layers::{GruCell, Mlp};
use crate::matcore::{col_softmax, eta_norm, layernorm_cols, Axis, Mat, LN_EPS};
use crate::rng::{init_weight, normal_mat, seeded};

/// Fixed parameters of slot attention with slot width equal to the feature width `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotWeights {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub gru: GruCell,
    pub mlp: Mlp,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl SlotWeights {
    pub fn seeded(rng: &mut impl Rng, d: usize) -> Self {
        Self {
            w_q: init_weight(rng, d, d),
            w_k: init_weight(rng, d, d),
            w_v: init_weight(rng, d, d),
            gru: GruCell::seeded(rng, d, d),
            mlp: Mlp::seeded(rng, d, d, d),
            mu: vec![0.0; d],
            sigma: vec![1.0; d],
        }
    }

    /// Identity projections, zero recurrent and MLP weights, standard-normal slots.
    pub fn identity(d: usize) -> Self {
        Self {
            w_q: Mat::identity(d),
            w_k: Mat::identity(d),
            w_v: Mat::identity(d),
            gru: GruCell::zeros(d, d),
            mlp: Mlp::zeros(d, d, d),
            mu: vec![0.0; d],
            sigma: vec![1.0; d],
        }
    }

    pub fn d(&self) -> usize {
        self.w_k.cols()
    }

    fn check(&self, d: usize) -> Result<()> {
        let square = |m: &Mat| m.rows() == d && m.cols() == d;
        if !(square(&self.w_q) && square(&self.w_k) && square(&self.w_v))
            || self.gru.hidden_dim() != d
            || self.mlp.in_dim() != d
            || self.mlp.out_dim() != d
            || self.mu.len() != d
            || self.sigma.len() != d
        {
            return Err(Error::shape("slot_pool", format!("slot weights do not match d = {d}")));
        }
        Ok(())
    }
}

/// Run settings of slot attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotConfig {
    pub k: usize,
    pub iters: usize,
    pub seed: u64,
    /// Plain column softmax and `U <- Z`, instead of row renormalization and the GRU/MLP update.
    pub simplified: bool,
    /// LayerNorm before the query, key and value projections.
    pub layernorm: bool,
    /// Initial slots; drawn from `N(mu, sigma^2)` when absent.
    pub init: Option<Mat>,
}

impl SlotConfig {
    pub fn new(k: usize, iters: usize, seed: u64) -> Self {
        Self {
            k,
            iters,
            seed,
            simplified: true,
            layernorm: true,
            init: None,
        }
    }
}

/// Initial slots `mu + sigma * N(0, I)`, one column per slot.
pub fn slot_init(w: &SlotWeights, k: usize, seed: u64) -> Result<Mat> {
    let z = normal_mat(&mut seeded(seed), w.mu.len(), k, 1.0);
    let mut u = z.diag_left(&w.sigma)?;
    for (i, &m) in w.mu.iter().enumerate() {
        for v in u.row_mut(i) {
            *v += m;
        }
    }
    Ok(u)
}

/// Iterative slot-attention pooling into `k` slots.
pub fn slot_pool(fm: &FeatureMap, w: &SlotWeights, cfg: &SlotConfig) -> Result<PooledSet> {
    let d = fm.d();
    w.check(d)?;
    if cfg.k == 0 || cfg.iters == 0 {
        return Err(Error::contract("slot attention needs k >= 1 and iters >= 1"));
    }
    let mut u = match &cfg.init {
        Some(u) if u.rows() == d && u.cols() == cfg.k => u.clone(),
        Some(u) => {
            return Err(Error::shape(
                "slot_pool",
                format!("initial slots {}x{} for d = {d}, k = {}", u.rows(), u.cols(), cfg.k),
            ))
        }
        None => slot_init(w, cfg.k, cfg.seed)?,
    };
    let norm = |m: &Mat| -> Result<Mat> {
        if cfg.layernorm {
            layernorm_cols(m, LN_EPS)
        } else {
            Ok(m.clone())
        }
    };
    let xn = norm(fm.x())?;
    let keys = w.w_k.matmul(&xn)?;
    let values = w.w_v.matmul(&xn)?;
    let scale = (w.w_k.rows() as f64).sqrt();
    let mut a = Mat::zeros(1, 1);
    for _ in 0..cfg.iters {
        let q = w.w_q.matmul(&norm(&u)?)?;
        let logits = keys.transpose().matmul(&q)?;
        a = col_softmax(&logits, scale)?;
        if !cfg.simplified {
            a = eta_norm(&a, Axis::Rows)?;
        }
        let z = values.matmul(&a)?;
        u = if cfg.simplified {
            z
        } else {
            let g = w.gru.step(&z, &u)?;
            g.add(&w.mlp.apply(&layernorm_cols(&g, LN_EPS)?)?)?
        };
    }
    u.ensure_finite("slot_pool")?;
    Ok(PooledSet {
        u,
        attention: Some(AttentionMatrix {
            a,
            stochastic_cols: cfg.simplified,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::framework::{run_pooling, PoolingSpec};
    use crate::rng::uniform_mat;

    #[test]
    fn identical_columns_give_uniform_attention() {
        let x = Mat::from_rows(&[[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]]);
        let out = slot_pool(&FeatureMap::from_mat(x), &SlotWeights::identity(2), &SlotConfig::new(1, 2, 3)).unwrap();
        for &v in out.attention.unwrap().a.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weights_collapse_to_zero() {
        let mut w = SlotWeights::identity(3);
        w.w_q = Mat::zeros(3, 3);
        w.w_k = Mat::zeros(3, 3);
        w.w_v = Mat::zeros(3, 3);
        w.sigma = vec![0.0; 3];
        let mut cfg = SlotConfig::new(2, 1, 0);
        cfg.simplified = false;
        let x = uniform_mat(&mut seeded(1), 3, 5, 0.0, 1.0);
        let out = slot_pool(&FeatureMap::from_mat(x), &w, &cfg).unwrap();
        assert_eq!(out.u, Mat::zeros(3, 2));
    }

    #[test]
    fn simplified_attention_is_stochastic() {
        let mut rng = seeded(5);
        let w = SlotWeights::seeded(&mut rng, 4);
        let x = uniform_mat(&mut rng, 4, 10, -1.0, 1.0);
        let out = slot_pool(&FeatureMap::from_mat(x), &w, &SlotConfig::new(3, 3, 9)).unwrap();
        let a = out.attention.unwrap();
        assert!(a.stochastic_cols && a.check_stochastic(1e-9));
    }

    #[test]
    fn full_mode_rows_are_normalized() {
        let mut rng = seeded(6);
        let w = SlotWeights::seeded(&mut rng, 4);
        let x = uniform_mat(&mut rng, 4, 10, -1.0, 1.0);
        let mut cfg = SlotConfig::new(3, 2, 9);
        cfg.simplified = false;
        let out = slot_pool(&FeatureMap::from_mat(x), &w, &cfg).unwrap();
        let a = out.attention.unwrap();
        assert!(!a.stochastic_cols);
        for i in 0..10 {
            assert!((a.a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_initialized_single_slot_is_cross_attention() {
        // Hand trace on a 2x3 X with a zero entry, identity weights, no LN:
        // q = gap(X), a = softmax(X^T q / sqrt(2)), u = X a.
        let x = Mat::from_rows(&[[0.0, 1.0, 2.0], [1.0, 3.0, 0.5]]);
        let q = x.row_mean();
        let logits = x.transpose().matmul(&q).unwrap().into_vec();
        let e: Vec<f64> = logits.iter().map(|l| (l / 2f64.sqrt()).exp()).collect();
        let total: f64 = e.iter().sum();
        let a: Vec<f64> = e.iter().map(|v| v / total).collect();
        let expected = x.matvec(&a).unwrap();

        let mut cfg = SlotConfig::new(1, 1, 0);
        cfg.layernorm = false;
        cfg.init = Some(q);
        let out = slot_pool(&FeatureMap::from_mat(x), &SlotWeights::identity(2), &cfg).unwrap();
        for (u, v) in out.u.data().iter().zip(&expected) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn engine_matches_direct_in_both_modes() {
        let mut rng = seeded(8);
        for simplified in [true, false] {
            let w = SlotWeights::seeded(&mut rng, 5);
            let fm = FeatureMap::from_mat(uniform_mat(&mut rng, 5, 12, -1.0, 1.0));
            let mut cfg = SlotConfig::new(3, 3, 4);
            cfg.simplified = simplified;
            let direct = slot_pool(&fm, &w, &cfg).unwrap();
            let eng = run_pooling(&PoolingSpec::slot(&w, &cfg), &fm).unwrap();
            assert!(eng.u.max_abs_diff(&direct.u).unwrap() < 1e-12);
        }
    }
}
