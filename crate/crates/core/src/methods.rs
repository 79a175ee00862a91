//! Names of the implemented poolers and a single entry point that builds and
//! runs any of them from a [`RunConfig`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster_poolers::{kmeans_init, kmeans_pool, otk_pool, slot_pool, Psi, SinkhornParams, SlotConfig, SlotWeights};
use crate::error::{Error, Result};
use crate::framework::{AttentionMatrix, FeatureMap, PooledSet};
use crate::layers::{Affine, Mlp};
use crate::matcore::Mat;
use crate::reweight_poolers::{cbam_pool, se_pool, CbamWeights, SeWeights};
use crate::rng::{seeded, PoolRng};
use crate::simple_poolers::{gap, gem, how, lse, max_pool, HowConfig};
use crate::simpool::{simpool_pool, SimPoolParams};
use crate::tensor_io::RunConfig;
use crate::transformer_poolers::{cait_class_attention, vit_cls_pool, VitBlock, VitWeights};

pub const DEFAULT_K: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "gap")]
    Gap,
    #[serde(rename = "max")]
    Max,
    #[serde(rename = "gem")]
    Gem,
    #[serde(rename = "lse")]
    Lse,
    #[serde(rename = "how")]
    How,
    #[serde(rename = "sinkhorn-otk")]
    SinkhornOtk,
    #[serde(rename = "kmeans")]
    Kmeans,
    #[serde(rename = "slot")]
    Slot,
    #[serde(rename = "se")]
    Se,
    #[serde(rename = "cbam")]
    Cbam,
    #[serde(rename = "vit")]
    Vit,
    #[serde(rename = "cait")]
    Cait,
    #[serde(rename = "simpool")]
    SimPool,
}

impl Method {
    pub const ALL: [Method; 13] = [
        Method::Gap,
        Method::Max,
        Method::Gem,
        Method::Lse,
        Method::How,
        Method::SinkhornOtk,
        Method::Kmeans,
        Method::Slot,
        Method::Se,
        Method::Cbam,
        Method::Vit,
        Method::Cait,
        Method::SimPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gap => "gap",
            Method::Max => "max",
            Method::Gem => "gem",
            Method::Lse => "lse",
            Method::How => "how",
            Method::SinkhornOtk => "sinkhorn-otk",
            Method::Kmeans => "kmeans",
            Method::Slot => "slot",
            Method::Se => "se",
            Method::Cbam => "cbam",
            Method::Vit => "vit",
            Method::Cait => "cait",
            Method::SimPool => "simpool",
        }
    }

    /// Pools into `k` vectors rather than one.
    pub fn multi_vector(self) -> bool {
        matches!(self, Method::SinkhornOtk | Method::Kmeans | Method::Slot)
    }

    pub fn iterative(self) -> bool {
        matches!(self, Method::Kmeans | Method::Slot | Method::Vit | Method::Cait)
    }

    /// Attention produced by a softmax over patches.
    pub fn softmax_based(self) -> bool {
        matches!(self, Method::Slot | Method::Vit | Method::Cait | Method::SimPool)
    }

    fn default_iters(self) -> usize {
        match self {
            Method::Kmeans => 10,
            Method::Slot => 3,
            Method::Cait => 2,
            _ => 1,
        }
    }

    fn weight_roles(self) -> &'static [&'static str] {
        match self {
            Method::How => &["centering", "projection"],
            Method::SinkhornOtk => &["anchors"],
            Method::Slot => &["w_q", "w_k", "w_v", "mu", "sigma"],
            Method::Se => &["w1", "w2"],
            Method::Cbam => &["w1", "w2", "conv", "conv_bias"],
            Method::Vit | Method::Cait => &["w_q", "w_k", "w_v", "w_u", "u0"],
            Method::SimPool => &["w_q", "w_k"],
            _ => &[],
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::contract(format!("unknown method '{s}', expected one of {}", names.join(", ")))
            })
    }
}

/// Weight matrices by role; absent roles are drawn from the seeded generator.
struct Bank {
    method: Method,
    mats: BTreeMap<String, Mat>,
}

impl Bank {
    fn new(method: Method, mats: BTreeMap<String, Mat>) -> Result<Self> {
        let roles = method.weight_roles();
        if let Some(extra) = mats.keys().find(|k| !roles.contains(&k.as_str())) {
            return Err(Error::contract(format!(
                "method {method} takes no weight '{extra}' (accepted: {})",
                if roles.is_empty() { "none".to_string() } else { roles.join(", ") }
            )));
        }
        Ok(Self { method, mats })
    }

    fn mat(&mut self, role: &str, shape: (usize, usize), fallback: impl FnOnce() -> Mat) -> Result<Mat> {
        match self.mats.remove(role) {
            Some(m) if m.shape() == shape => Ok(m),
            Some(m) => Err(Error::shape(
                "weights",
                format!(
                    "{} weight '{role}' is {}x{}, expected {}x{}",
                    self.method,
                    m.rows(),
                    m.cols(),
                    shape.0,
                    shape.1
                ),
            )),
            None => Ok(fallback()),
        }
    }

    fn vector(&mut self, role: &str, len: usize, fallback: impl FnOnce() -> Vec<f64>) -> Result<Vec<f64>> {
        match self.mats.remove(role) {
            Some(m) if m.data().len() == len && m.cols().min(m.rows()) == 1 => Ok(m.into_vec()),
            Some(m) => Err(Error::shape(
                "weights",
                format!("{} weight '{role}' is {}x{}, expected a vector of {len}", self.method, m.rows(), m.cols()),
            )),
            None => Ok(fallback()),
        }
    }
}

fn scalar_only(cfg: &RunConfig) -> Result<()> {
    if cfg.k.is_some_and(|k| k != 1) {
        return Err(Error::contract(format!("method {} pools into a single vector; k does not apply", cfg.method)));
    }
    Ok(())
}

fn single_step(cfg: &RunConfig) -> Result<()> {
    if !cfg.method.iterative() && cfg.iters.is_some_and(|t| t != 1) {
        return Err(Error::contract(format!("method {} is not iterative; iters does not apply", cfg.method)));
    }
    Ok(())
}

fn single_head(cfg: &RunConfig) -> Result<()> {
    if cfg.heads != 1 && !matches!(cfg.method, Method::Vit | Method::Cait) {
        return Err(Error::contract(format!("method {} has a single head", cfg.method)));
    }
    Ok(())
}

fn uniform(u: Vec<f64>, p: usize) -> PooledSet {
    PooledSet {
        u: Mat::col_vector(&u),
        attention: Some(AttentionMatrix {
            a: Mat::filled(p, 1, 1.0 / p as f64),
            stochastic_cols: true,
        }),
    }
}

fn normal(rng: &mut PoolRng, rows: usize, cols: usize) -> Mat {
    crate::rng::init_weight(rng, rows, cols)
}

/// Builds the configured pooler, filling absent weights from `cfg.seed`, and runs it.
pub fn run_method(cfg: &RunConfig, fm: &FeatureMap, weights: BTreeMap<String, Mat>) -> Result<PooledSet> {
    cfg.validate()?;
    single_step(cfg)?;
    single_head(cfg)?;
    let method = cfg.method;
    if !method.multi_vector() {
        scalar_only(cfg)?;
    }
    let mut bank = Bank::new(method, weights)?;
    let mut rng = seeded(cfg.seed);
    let (d, p) = (fm.d(), fm.p());
    let k = cfg.k.unwrap_or(DEFAULT_K);
    let iters = cfg.iters.unwrap_or(method.default_iters());
    match method {
        Method::Gap => Ok(uniform(gap(fm), p)),
        Method::Max => {
            let u = max_pool(fm);
            Ok(PooledSet {
                u: Mat::col_vector(&u),
                attention: None,
            })
        }
        Method::Gem => Ok(uniform(gem(fm, cfg.gamma())?, p)),
        Method::Lse => Ok(uniform(lse(fm, cfg.r)?, p)),
        Method::How => {
            let centering = bank.vector("centering", d, || vec![0.0; d])?;
            let projection = match bank.mats.remove("projection") {
                Some(m) if m.cols() == d => m,
                Some(m) => {
                    return Err(Error::shape(
                        "weights",
                        format!("how weight 'projection' is {}x{}, expected ? x {d}", m.rows(), m.cols()),
                    ))
                }
                None => Mat::identity(d),
            };
            let cfg_how = HowConfig::new(centering, projection)?;
            let u = how(fm, &cfg_how)?;
            let sq: Vec<f64> = (0..p).map(|j| fm.x().col(j).iter().map(|v| v * v).sum()).collect();
            Ok(PooledSet {
                u: Mat::col_vector(&u),
                attention: Some(AttentionMatrix {
                    a: Mat::col_vector(&sq),
                    stochastic_cols: false,
                }),
            })
        }
        Method::SinkhornOtk => {
            let params = SinkhornParams::new(cfg.epsilon)?;
            let anchors = match bank.mats.remove("anchors") {
                Some(m) if m.rows() == d && cfg.k.is_none_or(|k| k == m.cols()) => m,
                Some(m) => {
                    return Err(Error::shape(
                        "weights",
                        format!("anchors are {}x{}, expected {d}x{k}", m.rows(), m.cols()),
                    ))
                }
                None => fm.x().select_cols(&kmeans_init(p, k, cfg.seed)?)?,
            };
            let psi = match cfg.sigma {
                Some(sigma) => Psi::Nystrom { sigma },
                None => Psi::Identity,
            };
            otk_pool(fm, &anchors, &params, psi)
        }
        Method::Kmeans => kmeans_pool(fm, k, iters, cfg.seed),
        Method::Slot => {
            let mut w = SlotWeights::seeded(&mut rng, d);
            w.w_q = bank.mat("w_q", (d, d), || w.w_q.clone())?;
            w.w_k = bank.mat("w_k", (d, d), || w.w_k.clone())?;
            w.w_v = bank.mat("w_v", (d, d), || w.w_v.clone())?;
            w.mu = bank.vector("mu", d, || w.mu.clone())?;
            w.sigma = bank.vector("sigma", d, || w.sigma.clone())?;
            let mut sc = SlotConfig::new(k, iters, cfg.seed);
            sc.simplified = cfg.simplified;
            sc.layernorm = cfg.layernorm;
            slot_pool(fm, &w, &sc)
        }
        Method::Se | Method::Cbam => {
            if cfg.reduction == 0 || d % cfg.reduction != 0 {
                return Err(Error::contract(format!("reduction {} does not divide d = {d}", cfg.reduction)));
            }
            let h = d / cfg.reduction;
            let w1 = bank.mat("w1", (h, d), || normal(&mut rng, h, d))?;
            let w2 = bank.mat("w2", (d, h), || normal(&mut rng, d, h))?;
            let se = SeWeights::new(Mlp::new(Affine::linear(w1), Affine::linear(w2))?)?;
            if method == Method::Se {
                return se_pool(fm, &se);
            }
            let kernel = bank.mat("conv", (2, 49), || crate::rng::normal_mat(&mut rng, 2, 49, 1.0 / 98f64.sqrt()))?;
            let bias = bank.vector("conv_bias", 1, || vec![0.0])?[0];
            cbam_pool(fm, &CbamWeights::new(se, kernel, bias)?, cfg.simplified)
        }
        Method::Vit | Method::Cait => {
            let mut w = VitWeights::seeded(&mut rng, d, 1);
            let mut b: VitBlock = w.blocks.remove(0);
            b.w_q = bank.mat("w_q", (d, d), || b.w_q.clone())?;
            b.w_k = bank.mat("w_k", (d, d), || b.w_k.clone())?;
            b.w_v = bank.mat("w_v", (d, d), || b.w_v.clone())?;
            b.w_u = bank.mat("w_u", (d, d), || b.w_u.clone())?;
            let u0 = bank.vector("u0", d, || w.u0.clone())?;
            let w = VitWeights::shared(u0, b);
            if method == Method::Vit {
                vit_cls_pool(fm, &w, cfg.heads, iters, cfg.simplified)
            } else {
                cait_class_attention(fm, &w, cfg.heads, iters)
            }
        }
        Method::SimPool => {
            let seeded_params = SimPoolParams::seeded(&mut rng, d, cfg.gamma())?;
            let w_q = bank.mat("w_q", (d, d), || seeded_params.w_q.clone())?;
            let w_k = bank.mat("w_k", (d, d), || seeded_params.w_k.clone())?;
            let params = SimPoolParams::new(w_q, w_k, cfg.gamma())?.with_ln(cfg.layernorm, seeded_params.ln_eps);
            simpool_pool(fm, &params)
        }
    }
}
