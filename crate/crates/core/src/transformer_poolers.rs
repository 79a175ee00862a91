//! Class-token pooling: the cross-attention stream of a ViT block and the
//! class-attention stage of CaiT, with the patch features held fixed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framework::{block_diagonal_query, merge_diagonal_blocks, AttentionMatrix, FeatureMap, PooledSet};
use crate::layers::Mlp;
use crate::matcore::{col_softmax, layernorm_cols, Mat, LN_EPS};
use crate::rng::{init_weight, normal_mat};

/// Weights of one class-token block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitBlock {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_u: Mat,
    pub mlp: Mlp,
}

impl VitBlock {
    pub fn seeded(rng: &mut impl Rng, d: usize) -> Self {
        Self {
            w_q: init_weight(rng, d, d),
            w_k: init_weight(rng, d, d),
            w_v: init_weight(rng, d, d),
            w_u: init_weight(rng, d, d),
            mlp: Mlp::seeded(rng, d, d, d),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            w_q: Mat::identity(d),
            w_k: Mat::identity(d),
            w_v: Mat::identity(d),
            w_u: Mat::identity(d),
            mlp: Mlp::identity(d),
        }
    }

    fn check(&self, d: usize) -> Result<()> {
        let ok = [&self.w_q, &self.w_k, &self.w_v, &self.w_u]
            .iter()
            .all(|m| m.shape() == (d, d))
            && self.mlp.in_dim() == d
            && self.mlp.out_dim() == d;
        if ok {
            Ok(())
        } else {
            Err(Error::shape("class-token block", format!("weights do not match d = {d}")))
        }
    }
}

/// Initial class token and one block per iteration. A single block is shared
/// by every iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitWeights {
    pub u0: Vec<f64>,
    pub blocks: Vec<VitBlock>,
}

impl VitWeights {
    pub fn seeded(rng: &mut impl Rng, d: usize, iters: usize) -> Self {
        let u0 = normal_mat(rng, d, 1, 1.0).into_vec();
        let blocks = (0..iters.max(1)).map(|_| VitBlock::seeded(rng, d)).collect();
        Self { u0, blocks }
    }

    pub fn shared(u0: Vec<f64>, block: VitBlock) -> Self {
        Self { u0, blocks: vec![block] }
    }

    pub fn block(&self, t: usize) -> &VitBlock {
        if self.blocks.len() == 1 {
            &self.blocks[0]
        } else {
            &self.blocks[t]
        }
    }

    fn check(&self, d: usize, iters: usize) -> Result<()> {
        if self.u0.len() != d {
            return Err(Error::shape("class-token block", format!("u0 has {} entries, d = {d}", self.u0.len())));
        }
        if self.blocks.len() != 1 && self.blocks.len() < iters {
            return Err(Error::contract(format!(
                "{} weight blocks for {iters} iterations",
                self.blocks.len()
            )));
        }
        self.blocks.iter().try_for_each(|b| b.check(d))
    }
}

/// Contiguous row blocks of `a`, one per head.
pub fn split_heads(a: &Mat, m: usize) -> Result<Vec<Mat>> {
    let d = a.rows();
    if m == 0 || !d.is_multiple_of(m) {
        return Err(Error::contract(format!("{m} heads do not divide d = {d}")));
    }
    let dh = d / m;
    Ok((0..m).map(|h| a.row_block(h * dh, (h + 1) * dh)).collect())
}

/// Stacks head blocks back into one matrix.
pub fn merge_heads(heads: &[Mat]) -> Result<Mat> {
    let Some(first) = heads.first() else {
        return Err(Error::contract("no heads to merge"));
    };
    let cols = first.cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for h in heads {
        if h.cols() != cols {
            return Err(Error::shape("merge_heads", "heads differ in column count"));
        }
        data.extend_from_slice(h.data());
        rows += h.rows();
    }
    Mat::new(rows, cols, data)
}

/// Multi-head cross-attention of a single query, one head at a time.
/// Returns the merged `d x 1` output and the `p x m` attention.
pub fn cross_attention_heads(keys: &Mat, values: &Mat, q: &[f64], m: usize) -> Result<(Mat, Mat)> {
    let ks = split_heads(keys, m)?;
    let vs = split_heads(values, m)?;
    let qs = split_heads(&Mat::col_vector(q), m)?;
    let scale = ((keys.rows() / m) as f64).sqrt();
    let mut zs = Vec::with_capacity(m);
    let mut att = Mat::zeros(keys.cols(), m);
    for h in 0..m {
        let a = col_softmax(&ks[h].transpose().matmul(&qs[h])?, scale)?;
        zs.push(vs[h].matmul(&a)?);
        att.set_col(h, a.data());
    }
    Ok((merge_heads(&zs)?, att))
}

/// The same computation as one product with the block-diagonal query.
pub fn cross_attention_block_diagonal(keys: &Mat, values: &Mat, q: &[f64], m: usize) -> Result<(Mat, Mat)> {
    let qb = block_diagonal_query(&Mat::col_vector(q), m)?;
    let scale = ((keys.rows() / m) as f64).sqrt();
    let a = col_softmax(&keys.transpose().matmul(&qb)?, scale)?;
    let z = merge_diagonal_blocks(&values.matmul(&a)?, m)?;
    Ok((z, a))
}

/// Class-token pooling with `m` heads over `iters` blocks.
///
/// Simplified blocks compute `u <- mlp(W_u z)`. Full blocks use pre-norm
/// residuals: `u <- u + W_u z`, then `u <- u + mlp(LN(u))`, with LayerNorm on
/// the query and patch inputs.
pub fn vit_cls_pool(fm: &FeatureMap, w: &VitWeights, m: usize, iters: usize, simplified: bool) -> Result<PooledSet> {
    let d = fm.d();
    if iters == 0 {
        return Err(Error::contract("class-token pooling needs at least one iteration"));
    }
    if m == 0 || !d.is_multiple_of(m) {
        return Err(Error::contract(format!("{m} heads do not divide d = {d}")));
    }
    w.check(d, iters)?;
    fm.x().ensure_finite("vit_cls_pool")?;
    let xs = if simplified {
        fm.x().clone()
    } else {
        layernorm_cols(fm.x(), LN_EPS)?
    };
    let mut u = Mat::col_vector(&w.u0);
    let mut att = Mat::zeros(fm.p(), m);
    for t in 0..iters {
        let b = w.block(t);
        let un = if simplified { u.clone() } else { layernorm_cols(&u, LN_EPS)? };
        let q = b.w_q.matmul(&un)?;
        let (z, a) = cross_attention_heads(&b.w_k.matmul(&xs)?, &b.w_v.matmul(&xs)?, q.data(), m)?;
        att = a;
        let y = b.w_u.matmul(&z)?;
        u = if simplified {
            b.mlp.apply(&y)?
        } else {
            let r = u.add(&y)?;
            r.add(&b.mlp.apply(&layernorm_cols(&r, LN_EPS)?)?)?
        };
    }
    u.ensure_finite("vit_cls_pool")?;
    Ok(PooledSet {
        u,
        attention: Some(AttentionMatrix {
            a: att.row_mean(),
            stochastic_cols: true,
        }),
    })
}

/// CaiT class attention: simplified class-token blocks over fixed patches.
pub fn cait_class_attention(fm: &FeatureMap, w: &VitWeights, m: usize, iters: usize) -> Result<PooledSet> {
    vit_cls_pool(fm, w, m, iters, true)
}
