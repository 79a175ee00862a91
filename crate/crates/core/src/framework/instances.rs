//! Ready-made engine configurations for the poolers of the crate.

use super::{AttentionRule, InitRule, MapRule, PoolFn, PoolingSpec, Similarity, UpdateRule};
use crate::cluster_poolers::{NystromMap, SinkhornParams, SlotConfig, SlotWeights};
use crate::error::{Error, Result};
use crate::matcore::Mat;
use crate::meanfam::AlphaParam;
use crate::reweight_poolers::{CbamWeights, SeWeights};
use crate::simple_poolers::HowConfig;
use crate::transformer_poolers::VitBlock;

fn base(k: usize, iters: usize, init: InitRule, attention: AttentionRule, pool_fn: PoolFn) -> PoolingSpec {
    PoolingSpec {
        k,
        iters,
        init,
        query_map: MapRule::Identity,
        key_map: MapRule::Identity,
        value_map: MapRule::Identity,
        similarity: Similarity::Dot,
        attention,
        pool_fn,
        feat_update: UpdateRule::Identity,
        pool_update: UpdateRule::Identity,
        heads: 1,
    }
}

impl PoolingSpec {
    /// Global average pooling: uniform attention, arithmetic mean.
    pub fn gap() -> Self {
        base(1, 1, InitRule::Gap, AttentionRule::Uniform, PoolFn::FAlpha(AlphaParam::arithmetic()))
    }

    /// Max pooling as the `alpha = -inf` limit over all-ones attention.
    pub fn max() -> Self {
        base(1, 1, InitRule::Gap, AttentionRule::Ones, PoolFn::FAlpha(AlphaParam::max()))
    }

    pub fn gem(gamma: f64) -> Result<Self> {
        let alpha = AlphaParam::from_gamma(gamma)?;
        Ok(base(1, 1, InitRule::Gap, AttentionRule::Uniform, PoolFn::FAlpha(alpha)))
    }

    pub fn lse(r: f64) -> Self {
        base(1, 1, InitRule::Gap, AttentionRule::Uniform, PoolFn::Lse { r })
    }

    pub fn how(cfg: &HowConfig) -> Self {
        let mut s = base(
            1,
            1,
            InitRule::Gap,
            AttentionRule::SquaredColumnNorms,
            PoolFn::FAlpha(AlphaParam::arithmetic()),
        );
        s.value_map = MapRule::LocalAvg3 {
            projection: cfg.projection.clone(),
            centering: cfg.centering.clone(),
        };
        s.pool_update = UpdateRule::L2Normalize;
        s
    }

    /// Lloyd iterations from the given initial centroids.
    pub fn kmeans(init: InitRule, k: usize, iters: usize) -> Self {
        let mut s = base(k, iters, init, AttentionRule::HardArgmax, PoolFn::FAlpha(AlphaParam::arithmetic()));
        s.similarity = Similarity::NegSqEuclid;
        s
    }

    /// Optimal-transport pooling against fixed anchors; `psi = None` is the identity embedding.
    pub fn otk(anchors: &Mat, params: &SinkhornParams, psi: Option<NystromMap>) -> Self {
        let attention = AttentionRule::Sinkhorn {
            epsilon: params.epsilon,
            tol: params.tol,
            max_iter: params.max_iter,
        };
        let mut s = base(
            anchors.cols(),
            1,
            InitRule::Given(anchors.clone()),
            attention,
            PoolFn::FAlpha(AlphaParam::arithmetic()),
        );
        s.similarity = Similarity::NegSqEuclid;
        if let Some(map) = psi {
            s.value_map = MapRule::Nystrom(map);
        }
        s
    }

    pub fn slot(w: &SlotWeights, cfg: &SlotConfig) -> Self {
        let init = match &cfg.init {
            Some(u) => InitRule::Given(u.clone()),
            None => InitRule::SeededNormal {
                mu: w.mu.clone(),
                sigma: w.sigma.clone(),
                seed: cfg.seed,
            },
        };
        let scale = (w.w_k.rows() as f64).sqrt();
        let attention = if cfg.simplified {
            AttentionRule::ColSoftmax { scale }
        } else {
            AttentionRule::SoftmaxThenRowNorm { scale }
        };
        let mut s = base(cfg.k, cfg.iters, init, attention, PoolFn::FAlpha(AlphaParam::arithmetic()));
        let wrap = |m: &Mat| {
            let lin = MapRule::Linear(m.clone());
            if cfg.layernorm {
                MapRule::LayerNormThen(Box::new(lin))
            } else {
                lin
            }
        };
        s.query_map = wrap(&w.w_q);
        s.key_map = wrap(&w.w_k);
        s.value_map = wrap(&w.w_v);
        if !cfg.simplified {
            s.pool_update = UpdateRule::GruMlp {
                gru: w.gru.clone(),
                mlp: w.mlp.clone(),
            };
        }
        s
    }

    /// Squeeze-and-excitation followed by GAP.
    pub fn se(w: &SeWeights) -> Self {
        let mut s = base(1, 1, InitRule::Gap, AttentionRule::Uniform, PoolFn::FAlpha(AlphaParam::arithmetic()));
        s.query_map = MapRule::GatedMlp {
            mlp: w.mlp.clone(),
            scale: 1.0,
        };
        s.value_map = MapRule::QueryGated { scale: 1.0 };
        s
    }

    /// Average-only CBAM: query `sigmoid(mlp(u)) / d`, similarity `X^T q`,
    /// attention `sigmoid(conv7(s)) / p`.
    pub fn cbam_simplified(w: &CbamWeights, d: usize, p: usize) -> Self {
        let mut s = base(
            1,
            1,
            InitRule::Gap,
            AttentionRule::SigmoidConv {
                kernel: w.avg_kernel().to_vec(),
                bias: w.bias,
                scale: 1.0 / p as f64,
            },
            PoolFn::FAlpha(AlphaParam::arithmetic()),
        );
        s.query_map = MapRule::GatedMlp {
            mlp: w.channel.mlp.clone(),
            scale: 1.0 / d as f64,
        };
        s.value_map = MapRule::QueryGated { scale: d as f64 };
        s
    }

    /// Simplified class-token pooling with one weight block shared by all iterations.
    pub fn vit(u0: &[f64], block: &VitBlock, heads: usize, iters: usize) -> Result<Self> {
        let d = u0.len();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::contract(format!("{heads} heads do not divide d = {d}")));
        }
        let scale = ((d / heads) as f64).sqrt();
        let mut s = base(
            1,
            iters,
            InitRule::Given(Mat::col_vector(u0)),
            AttentionRule::ColSoftmax { scale },
            PoolFn::FAlpha(AlphaParam::arithmetic()),
        );
        s.query_map = MapRule::Linear(block.w_q.clone());
        s.key_map = MapRule::Linear(block.w_k.clone());
        s.value_map = MapRule::Linear(block.w_v.clone());
        s.pool_update = UpdateRule::LinearThenMlp {
            w: block.w_u.clone(),
            mlp: block.mlp.clone(),
        };
        s.heads = heads;
        Ok(s)
    }

    /// SimPool: GAP query, LayerNorm'd keys and shifted values, `f_alpha` pooling.
    pub fn simpool(w_q: &Mat, w_k: &Mat, gamma: f64, layernorm: bool) -> Result<Self> {
        let d = w_q.rows();
        let alpha = AlphaParam::from_gamma(gamma)?;
        let mut s = base(
            1,
            1,
            InitRule::Gap,
            AttentionRule::ColSoftmax {
                scale: (d as f64).sqrt(),
            },
            PoolFn::FAlpha(alpha),
        );
        s.query_map = MapRule::Linear(w_q.clone());
        let key = MapRule::Linear(w_k.clone());
        if layernorm {
            s.key_map = MapRule::LayerNormThen(Box::new(key));
            s.value_map = MapRule::ShiftMin(Box::new(MapRule::LayerNormThen(Box::new(MapRule::Identity))));
        } else {
            s.key_map = key;
            s.value_map = MapRule::ShiftMin(Box::new(MapRule::Identity));
        }
        Ok(s)
    }
}
