use super::Mat;
use crate::error::{Error, Result};

/// Default LayerNorm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Which slices [`eta_norm`] normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Each row sums to one.
    Rows,
    /// Each column sums to one.
    Cols,
}

/// Column-wise softmax of `s / scale`.
///
/// The column maximum is subtracted before exponentiation, so large logits
/// never overflow.
pub fn col_softmax(s: &Mat, scale: f64) -> Result<Mat> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::contract(format!("softmax scale must be positive, got {scale}")));
    }
    s.ensure_finite("col_softmax")?;
    let (p, k) = s.shape();
    let mut out = Mat::zeros(p, k);
    for j in 0..k {
        let mut m = f64::NEG_INFINITY;
        for i in 0..p {
            m = m.max(s[(i, j)] / scale);
        }
        let mut total = 0.0;
        for i in 0..p {
            let e = (s[(i, j)] / scale - m).exp();
            out[(i, j)] = e;
            total += e;
        }
        for i in 0..p {
            out[(i, j)] /= total;
        }
    }
    Ok(out)
}

/// `l1`-normalizes rows or columns of a nonnegative matrix.
pub fn eta_norm(a: &Mat, axis: Axis) -> Result<Mat> {
    if let Some(&neg) = a.data().iter().find(|&&x| x < 0.0 || x.is_nan()) {
        return Err(Error::contract(format!(
            "eta_norm requires nonnegative entries, found {neg}"
        )));
    }
    let (r, c) = a.shape();
    let mut out = a.clone();
    match axis {
        Axis::Rows => {
            for i in 0..r {
                let total: f64 = a.row(i).iter().sum();
                if total == 0.0 {
                    return Err(Error::DegenerateMass {
                        op: "eta_norm",
                        axis: "row",
                        index: i,
                    });
                }
                for x in out.row_mut(i) {
                    *x /= total;
                }
            }
        }
        Axis::Cols => {
            for j in 0..c {
                let total: f64 = (0..r).map(|i| a[(i, j)]).sum();
                if total == 0.0 {
                    return Err(Error::DegenerateMass {
                        op: "eta_norm",
                        axis: "column",
                        index: j,
                    });
                }
                for i in 0..r {
                    out[(i, j)] /= total;
                }
            }
        }
    }
    Ok(out)
}

/// Per-column LayerNorm without affine parameters:
/// `(x - mean) / sqrt(var + eps)` with the biased variance over the column.
pub fn layernorm_cols(x: &Mat, eps: f64) -> Result<Mat> {
    if !(eps > 0.0) {
        return Err(Error::contract(format!("layernorm eps must be positive, got {eps}")));
    }
    let (d, p) = x.shape();
    let mut out = Mat::zeros(d, p);
    for j in 0..p {
        let mean = (0..d).map(|i| x[(i, j)]).sum::<f64>() / d as f64;
        let var = (0..d).map(|i| (x[(i, j)] - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            out[(i, j)] = (x[(i, j)] - mean) * inv;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_mat, seeded, uniform_mat};
    use proptest::prelude::*;

    #[test]
    fn softmax_of_zero_column_is_uniform() {
        let a = col_softmax(&Mat::zeros(4, 1), 1.0).unwrap();
        assert_eq!(a.into_vec(), vec![0.25; 4]);
    }

    #[test]
    fn softmax_hand_oracle() {
        // exp(ln 2) = 2, exp(0) = 1, normalized by 3.
        let a = col_softmax(&Mat::from_rows(&[[2f64.ln()], [0.0]]), 1.0).unwrap();
        assert!((a[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((a[(1, 0)] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let a = col_softmax(&Mat::from_rows(&[[1000.0], [0.0]]), 1.0).unwrap();
        assert_eq!(a[(0, 0)], 1.0);
        assert_eq!(a[(1, 0)], 0.0);
    }

    #[test]
    fn softmax_rejects_bad_scale_and_nan() {
        assert!(col_softmax(&Mat::zeros(2, 1), 0.0).is_err());
        let m = Mat::from_rows(&[[f64::NAN], [0.0]]);
        assert!(matches!(col_softmax(&m, 1.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn eta_examples() {
        let c = eta_norm(&Mat::from_rows(&[[1.0], [3.0]]), Axis::Cols).unwrap();
        assert_eq!(c.into_vec(), vec![0.25, 0.75]);
        let r = eta_norm(&Mat::from_rows(&[[2.0, 2.0]]), Axis::Rows).unwrap();
        assert_eq!(r.into_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn eta_zero_slice_names_index() {
        let m = Mat::from_rows(&[[1.0, 0.0], [1.0, 0.0]]);
        match eta_norm(&m, Axis::Cols) {
            Err(Error::DegenerateMass { axis: "column", index: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn eta_rows_is_idempotent() {
        let mut rng = seeded(5);
        for _ in 0..100 {
            let a = uniform_mat(&mut rng, 5, 7, 0.01, 3.0);
            let once = eta_norm(&a, Axis::Rows).unwrap();
            let twice = eta_norm(&once, Axis::Rows).unwrap();
            assert!(once.max_abs_diff(&twice).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn layernorm_two_element_column() {
        // mean 0, var 1: 1 / sqrt(1 + 1e-5)
        let y = layernorm_cols(&Mat::from_rows(&[[1.0], [-1.0]]), 1e-5).unwrap();
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[(0, 0)] - expected).abs() < 1e-15);
        assert!((y[(0, 0)] - 0.999995).abs() < 1e-6);
        assert!((y[(1, 0)] + expected).abs() < 1e-15);
    }

    #[test]
    fn layernorm_constant_column_is_zero() {
        let y = layernorm_cols(&Mat::from_rows(&[[3.0], [3.0], [3.0]]), LN_EPS).unwrap();
        assert_eq!(y.into_vec(), vec![0.0; 3]);
    }

    proptest! {
        #[test]
        fn softmax_columns_sum_to_one(vals in proptest::collection::vec(-1e6f64..1e6, 12), scale in 0.1f64..10.0) {
            let s = Mat::new(4, 3, vals).unwrap();
            let a = col_softmax(&s, scale).unwrap();
            for j in 0..3 {
                let total: f64 = a.col(j).iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn layernorm_affine_invariance(seed in 0u64..1000, a in 0.1f64..10.0, b in -10.0f64..10.0) {
            // LN(aX + b, eps) = LN(X, eps / a^2)
            let x = normal_mat(&mut seeded(seed), 6, 5, 1.0);
            let y = layernorm_cols(&x.scale(a).add_scalar(b), LN_EPS).unwrap();
            let base = layernorm_cols(&x, LN_EPS / (a * a)).unwrap();
            prop_assert!(y.max_abs_diff(&base).unwrap() <= 1e-9);
        }
    }
}
