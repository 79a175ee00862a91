//! Squeeze-and-excitation and CBAM, each followed by global average pooling so
//! that the block reduces a feature map to one vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framework::{AttentionMatrix, FeatureMap, PooledSet};
use crate::layers::{Affine, Mlp};
use crate::matcore::{sigmoid, Mat};
use crate::rng::{init_weight, normal_mat};

pub const KERNEL_SIZE: usize = 7;
const TAPS: usize = KERNEL_SIZE * KERNEL_SIZE;
const SATURATION: f64 = 20.0;

/// Channel gate `q = sigmoid(mlp(u))` with a `d / r` bottleneck.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeWeights {
    pub mlp: Mlp,
}

impl SeWeights {
    pub fn new(mlp: Mlp) -> Result<Self> {
        if mlp.in_dim() != mlp.out_dim() {
            return Err(Error::shape(
                "SeWeights::new",
                format!("gate maps {} channels to {}", mlp.in_dim(), mlp.out_dim()),
            ));
        }
        Ok(Self { mlp })
    }

    /// Bias-free layers `w1` (`d/r x d`) and `w2` (`d x d/r`).
    pub fn from_matrices(w1: Mat, w2: Mat) -> Result<Self> {
        Self::new(Mlp::new(Affine::linear(w1), Affine::linear(w2))?)
    }

    pub fn seeded(rng: &mut impl Rng, d: usize, reduction: usize) -> Result<Self> {
        let h = hidden_width(d, reduction)?;
        Self::from_matrices(init_weight(rng, h, d), init_weight(rng, d, h))
    }

    pub fn zeros(d: usize, reduction: usize) -> Result<Self> {
        let h = hidden_width(d, reduction)?;
        Ok(Self { mlp: Mlp::zeros(d, h, d) })
    }

    /// Zero weights and output bias `+20`, so every gate is `sigmoid(20)`.
    pub fn saturated(d: usize, reduction: usize) -> Result<Self> {
        let mut w = Self::zeros(d, reduction)?;
        w.mlp.l2.b = vec![SATURATION; d];
        Ok(w)
    }

    pub fn d(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn reduction(&self) -> usize {
        self.d() / self.mlp.l1.out_dim().max(1)
    }

    /// `sigmoid(mlp(u))` for a single channel descriptor.
    pub fn gate(&self, u: &[f64]) -> Result<Vec<f64>> {
        Ok(self.mlp.apply(&Mat::col_vector(u))?.sigmoid().into_vec())
    }
}

fn hidden_width(d: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || !d.is_multiple_of(reduction) || d < reduction {
        return Err(Error::contract(format!("reduction {reduction} does not divide d = {d}")));
    }
    Ok(d / reduction)
}

/// CBAM: SE-style channel gate plus a `7 x 7` spatial convolution over the
/// channel-mean and channel-max maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbamWeights {
    pub channel: SeWeights,
    /// `2 x 49`: row 0 acts on the channel-mean map, row 1 on the channel-max map.
    pub kernel: Mat,
    pub bias: f64,
}

impl CbamWeights {
    pub fn new(channel: SeWeights, kernel: Mat, bias: f64) -> Result<Self> {
        if kernel.shape() != (2, TAPS) {
            return Err(Error::shape(
                "CbamWeights::new",
                format!("kernel is {}x{}, expected 2x{TAPS}", kernel.rows(), kernel.cols()),
            ));
        }
        Ok(Self { channel, kernel, bias })
    }

    pub fn seeded(rng: &mut impl Rng, d: usize, reduction: usize) -> Result<Self> {
        let channel = SeWeights::seeded(rng, d, reduction)?;
        let kernel = normal_mat(rng, 2, TAPS, 1.0 / ((2 * TAPS) as f64).sqrt());
        Self::new(channel, kernel, 0.0)
    }

    pub fn zeros(d: usize, reduction: usize) -> Result<Self> {
        Self::new(SeWeights::zeros(d, reduction)?, Mat::zeros(2, TAPS), 0.0)
    }

    /// Every gate, channel and spatial, at `sigmoid(20)`.
    pub fn saturated(d: usize, reduction: usize) -> Result<Self> {
        Self::new(SeWeights::saturated(d, reduction)?, Mat::zeros(2, TAPS), SATURATION)
    }

    pub fn avg_kernel(&self) -> &[f64] {
        self.kernel.row(0)
    }

    pub fn max_kernel(&self) -> &[f64] {
        self.kernel.row(1)
    }
}

/// Zero-padded, stride-1 `7 x 7` cross-correlation of `channels.len()` maps on a
/// `width x height` grid into one map. `kernel[c * 49 + dy * 7 + dx]` weights the
/// input at offset `(dx - 3, dy - 3)` of channel `c`.
pub fn conv7(channels: &[Vec<f64>], kernel: &[f64], bias: f64, width: usize, height: usize) -> Result<Vec<f64>> {
    let p = width * height;
    if kernel.len() != channels.len() * TAPS {
        return Err(Error::shape(
            "conv7",
            format!("{} kernel taps for {} channels", kernel.len(), channels.len()),
        ));
    }
    if let Some(c) = channels.iter().find(|c| c.len() != p) {
        return Err(Error::shape("conv7", format!("channel of {} cells on a {width}x{height} grid", c.len())));
    }
    let r = (KERNEL_SIZE / 2) as isize;
    let mut out = vec![bias; p];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut acc = 0.0;
            for (c, map) in channels.iter().enumerate() {
                let taps = &kernel[c * TAPS..(c + 1) * TAPS];
                for dy in -r..=r {
                    let yy = y + dy;
                    if yy < 0 || yy >= height as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = x + dx;
                        if xx < 0 || xx >= width as isize {
                            continue;
                        }
                        let t = ((dy + r) * KERNEL_SIZE as isize + dx + r) as usize;
                        acc += taps[t] * map[yy as usize * width + xx as usize];
                    }
                }
            }
            out[y as usize * width + x as usize] += acc;
        }
    }
    Ok(out)
}

/// Mean over channels of every column.
pub fn channel_mean(v: &Mat) -> Vec<f64> {
    v.col_mean().into_vec()
}

/// Max over channels of every column.
pub fn channel_max(v: &Mat) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; v.cols()];
    for i in 0..v.rows() {
        for (o, &x) in out.iter_mut().zip(v.row(i)) {
            *o = o.max(x);
        }
    }
    out
}

/// `X^T q / d`, the channel mean of `diag(q) X` written as a dot product.
pub fn gated_similarity(x: &Mat, q: &[f64]) -> Result<Vec<f64>> {
    let d = x.rows() as f64;
    Ok(x.transpose().matvec(q)?.into_iter().map(|s| s / d).collect())
}

fn check_channels(op: &'static str, fm: &FeatureMap, d: usize) -> Result<()> {
    if fm.d() != d {
        return Err(Error::shape(op, format!("weights for d = {d}, features have d = {}", fm.d())));
    }
    fm.x().ensure_finite(op)
}

/// `z = q ⊙ gap(X)` with `q = sigmoid(mlp(gap(X)))`.
pub fn se_pool(fm: &FeatureMap, w: &SeWeights) -> Result<PooledSet> {
    check_channels("se_pool", fm, w.d())?;
    let u0 = fm.x().row_mean().into_vec();
    let q = w.gate(&u0)?;
    let z: Vec<f64> = q.iter().zip(&u0).map(|(a, b)| a * b).collect();
    let p = fm.p();
    Ok(PooledSet {
        u: Mat::col_vector(&z),
        attention: Some(AttentionMatrix {
            a: Mat::filled(p, 1, 1.0 / p as f64),
            stochastic_cols: true,
        }),
    })
}

/// CBAM followed by GAP: `z = V a / p` with `V = diag(q) X`.
///
/// The full block gates channels with `sigmoid(mlp(gap) + mlp(max))` and
/// convolves the channel-mean and channel-max maps of `V`. The simplified block
/// uses the average branch only, with spatial similarity `X^T q / d`.
pub fn cbam_pool(fm: &FeatureMap, w: &CbamWeights, simplified: bool) -> Result<PooledSet> {
    check_channels("cbam_pool", fm, w.channel.d())?;
    let x = fm.x();
    let (width, height, p) = (fm.width(), fm.height(), fm.p());
    let u_avg = x.row_mean();
    let q = if simplified {
        w.channel.gate(u_avg.data())?
    } else {
        let u_max = Mat::col_vector(&channel_max(&x.transpose()));
        let logits = w.channel.mlp.apply(&u_avg)?.add(&w.channel.mlp.apply(&u_max)?)?;
        logits.sigmoid().into_vec()
    };
    let v = x.diag_left(&q)?;
    let logits = if simplified {
        conv7(&[gated_similarity(x, &q)?], w.avg_kernel(), w.bias, width, height)?
    } else {
        conv7(&[channel_mean(&v), channel_max(&v)], w.kernel.data(), w.bias, width, height)?
    };
    let a: Vec<f64> = logits.into_iter().map(sigmoid).collect();
    let z: Vec<f64> = v.matvec(&a)?.into_iter().map(|s| s / p as f64).collect();
    Ok(PooledSet {
        u: Mat::col_vector(&z),
        attention: Some(AttentionMatrix {
            a: Mat::col_vector(&a),
            stochastic_cols: false,
        }),
    })
}
