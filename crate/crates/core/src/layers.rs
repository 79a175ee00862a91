//! Small fixed-weight building blocks shared by the learned-style poolers:
//! affine maps, a two-layer ReLU perceptron and a GRU cell. All of them act on
//! every column of their input independently.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::Mat;
use crate::rng::init_weight;

/// `x -> W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Affine {
    pub fn new(w: Mat, b: Vec<f64>) -> Result<Self> {
        if b.len() != w.rows() {
            return Err(Error::shape(
                "Affine::new",
                format!("bias of {} for weight {}x{}", b.len(), w.rows(), w.cols()),
            ));
        }
        Ok(Self { w, b })
    }

    pub fn linear(w: Mat) -> Self {
        let b = vec![0.0; w.rows()];
        Self { w, b }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self::linear(Mat::zeros(out_dim, in_dim))
    }

    pub fn seeded(rng: &mut impl Rng, out_dim: usize, in_dim: usize) -> Self {
        Self::linear(init_weight(rng, out_dim, in_dim))
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        let mut y = self.w.matmul(x)?;
        for i in 0..y.rows() {
            let bi = self.b[i];
            for v in y.row_mut(i) {
                *v += bi;
            }
        }
        Ok(y)
    }
}

/// Two affine layers with a ReLU in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub l1: Affine,
    pub l2: Affine,
}

impl Mlp {
    pub fn new(l1: Affine, l2: Affine) -> Result<Self> {
        if l1.out_dim() != l2.in_dim() {
            return Err(Error::shape(
                "Mlp::new",
                format!("hidden widths {} and {} differ", l1.out_dim(), l2.in_dim()),
            ));
        }
        Ok(Self { l1, l2 })
    }

    pub fn seeded(rng: &mut impl Rng, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        let l1 = Affine::seeded(rng, hidden, in_dim);
        let l2 = Affine::seeded(rng, out_dim, hidden);
        Self { l1, l2 }
    }

    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            l1: Affine::zeros(hidden, in_dim),
            l2: Affine::zeros(out_dim, hidden),
        }
    }

    /// Exact identity on `R^d`, built as `relu(x) - relu(-x)` with hidden width `2d`.
    pub fn identity(d: usize) -> Self {
        let mut w1 = Mat::zeros(2 * d, d);
        let mut w2 = Mat::zeros(d, 2 * d);
        for i in 0..d {
            w1[(i, i)] = 1.0;
            w1[(d + i, i)] = -1.0;
            w2[(i, i)] = 1.0;
            w2[(i, d + i)] = -1.0;
        }
        Self {
            l1: Affine::linear(w1),
            l2: Affine::linear(w2),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.l1.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.l2.out_dim()
    }

    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        self.l2.apply(&self.l1.apply(x)?.relu())
    }
}

/// Gated recurrent unit cell (reset, update and candidate gates).
///
/// `r = s(W_ir x + b_ir + W_hr h + b_hr)`,
/// `z = s(W_iz x + b_iz + W_hz h + b_hz)`,
/// `n = tanh(W_in x + b_in + r * (W_hn h + b_hn))`,
/// `h' = (1 - z) * n + z * h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub input_r: Affine,
    pub input_z: Affine,
    pub input_n: Affine,
    pub hidden_r: Affine,
    pub hidden_z: Affine,
    pub hidden_n: Affine,
}

impl GruCell {
    pub fn seeded(rng: &mut impl Rng, in_dim: usize, hidden: usize) -> Self {
        Self {
            input_r: Affine::seeded(rng, hidden, in_dim),
            input_z: Affine::seeded(rng, hidden, in_dim),
            input_n: Affine::seeded(rng, hidden, in_dim),
            hidden_r: Affine::seeded(rng, hidden, hidden),
            hidden_z: Affine::seeded(rng, hidden, hidden),
            hidden_n: Affine::seeded(rng, hidden, hidden),
        }
    }

    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        Self {
            input_r: Affine::zeros(hidden, in_dim),
            input_z: Affine::zeros(hidden, in_dim),
            input_n: Affine::zeros(hidden, in_dim),
            hidden_r: Affine::zeros(hidden, hidden),
            hidden_z: Affine::zeros(hidden, hidden),
            hidden_n: Affine::zeros(hidden, hidden),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_r.out_dim()
    }

    /// One step on every column: input `x` (`in x k`), state `h` (`hidden x k`).
    pub fn step(&self, x: &Mat, h: &Mat) -> Result<Mat> {
        let r = self.input_r.apply(x)?.add(&self.hidden_r.apply(h)?)?.sigmoid();
        let z = self.input_z.apply(x)?.add(&self.hidden_z.apply(h)?)?.sigmoid();
        let n = self
            .input_n
            .apply(x)?
            .add(&r.mul(&self.hidden_n.apply(h)?)?)?
            .map(f64::tanh);
        let keep = z.mul(h)?;
        let fresh = z.map(|v| 1.0 - v).mul(&n)?;
        fresh.add(&keep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_mat, seeded};

    #[test]
    fn affine_adds_bias_per_row() {
        let a = Affine::new(Mat::identity(2), vec![1.0, -1.0]).unwrap();
        let y = a.apply(&Mat::from_rows(&[[0.0, 2.0], [3.0, 4.0]])).unwrap();
        assert_eq!(y, Mat::from_rows(&[[1.0, 3.0], [2.0, 3.0]]));
        assert!(Affine::new(Mat::identity(2), vec![0.0]).is_err());
    }

    #[test]
    fn mlp_identity_is_exact() {
        let x = normal_mat(&mut seeded(4), 5, 7, 3.0);
        assert_eq!(Mlp::identity(5).apply(&x).unwrap(), x);
    }

    #[test]
    fn mlp_relu_clips_hidden() {
        let l1 = Affine::linear(Mat::from_rows(&[[1.0], [-1.0]]));
        let l2 = Affine::linear(Mat::from_rows(&[[1.0, 1.0]]));
        let m = Mlp::new(l1, l2).unwrap();
        // |x| = relu(x) + relu(-x)
        assert_eq!(m.apply(&Mat::from_rows(&[[-2.5, 3.0]])).unwrap().into_vec(), vec![2.5, 3.0]);
    }

    #[test]
    fn zero_gru_halves_state() {
        let g = GruCell::zeros(3, 2);
        let h = Mat::from_rows(&[[2.0], [-4.0]]);
        let out = g.step(&Mat::filled(3, 1, 7.0), &h).unwrap();
        assert_eq!(out.into_vec(), vec![1.0, -2.0]);
    }

    #[test]
    fn gru_hand_trace() {
        // Scalar cell with unit input weights and zero recurrent weights:
        // r = z = s(x), n = tanh(x), h' = (1 - s(x)) tanh(x) + s(x) h.
        let one = || Affine::linear(Mat::from_rows(&[[1.0]]));
        let zero = || Affine::zeros(1, 1);
        let g = GruCell {
            input_r: one(),
            input_z: one(),
            input_n: one(),
            hidden_r: zero(),
            hidden_z: zero(),
            hidden_n: zero(),
        };
        let (x, h) = (0.3f64, 0.8f64);
        let s = 1.0 / (1.0 + (-x).exp());
        let expected = (1.0 - s) * x.tanh() + s * h;
        let got = g.step(&Mat::from_rows(&[[x]]), &Mat::from_rows(&[[h]])).unwrap()[(0, 0)];
        assert!((got - expected).abs() < 1e-15);
    }
}
