//! The generic pooling engine: one configurable loop that every pooler in
//! the crate can be expressed as.
//!
//! Each of the `T` iterations computes
//!
//! ```text
//! Q = phi_Q(U)          K = phi_K(X)          S = s(K, Q)
//! A = h(S)              V = phi_V(X)          Z = f^-1(f(V) A)
//! X <- phi_X(X)         U <- phi_U(Z)
//! ```
//!
//! and returns the final `U` together with the last attention matrix.

mod instances;

use serde::{Deserialize, Serialize};

use crate::cluster_poolers::{sinkhorn, NystromMap, SinkhornParams};
use crate::error::{Error, Result};
use crate::layers::{Affine, GruCell, Mlp};
use crate::matcore::{col_softmax, eta_norm, l2_normalize, layernorm_cols, sq_dist, Axis, Mat, LN_EPS};
use crate::meanfam::{lse_pool, weighted_generalized_mean, AlphaParam};
use crate::reweight_poolers::conv7;
use crate::rng::{normal_mat, seeded};
use crate::simple_poolers::avg3;

/// Feature matrix `X` (`d x p`) over a `W x H` spatial grid, flattened as
/// `j = y * W + x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    x: Mat,
    width: usize,
    height: usize,
}

impl FeatureMap {
    pub fn new(x: Mat, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || width * height != x.cols() {
            return Err(Error::shape(
                "FeatureMap::new",
                format!("grid {width}x{height} does not cover p = {}", x.cols()),
            ));
        }
        Ok(Self { x, width, height })
    }

    /// A `1 x p` grid.
    pub fn from_mat(x: Mat) -> Self {
        let p = x.cols();
        Self {
            x,
            width: p,
            height: 1,
        }
    }

    pub fn x(&self) -> &Mat {
        &self.x
    }

    pub fn into_mat(self) -> Mat {
        self.x
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn d(&self) -> usize {
        self.x.rows()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    /// Same grid, different features.
    pub fn with_features(&self, x: Mat) -> Result<Self> {
        Self::new(x, self.width, self.height)
    }
}

/// Attention `A` (`p x k`) returned with a pooled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMatrix {
    pub a: Mat,
    /// Every column is a probability distribution.
    pub stochastic_cols: bool,
}

impl AttentionMatrix {
    /// Largest deviation of a column sum from one.
    pub fn max_col_sum_error(&self) -> f64 {
        (0..self.a.cols())
            .map(|j| (self.a.col(j).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Checks the column-stochastic invariant at tolerance `tol`.
    pub fn check_stochastic(&self, tol: f64) -> bool {
        self.a.data().iter().all(|&x| (-tol..=1.0 + tol).contains(&x))
            && self.max_col_sum_error() <= tol
    }
}

/// Output `U` (`d' x k`) and the attention that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledSet {
    pub u: Mat,
    pub attention: Option<AttentionMatrix>,
}

/// Rule for the initial pooled matrix `U^0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitRule {
    /// `X 1_p / p` (requires `k = 1`).
    Gap,
    /// The given columns of `X`.
    DataColumns(Vec<usize>),
    /// A fixed matrix.
    Given(Mat),
    /// Column `j` is `mu + sigma * N(0, I)` from the seeded generator.
    SeededNormal { mu: Vec<f64>, sigma: Vec<f64>, seed: u64 },
}

/// Column-wise mapping used for queries, keys and values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapRule {
    Identity,
    Linear(Mat),
    /// Per-column LayerNorm, then the inner rule.
    LayerNormThen(Box<MapRule>),
    /// The inner rule, then subtraction of the global minimum.
    ShiftMin(Box<MapRule>),
    /// `projection * avg3(X - centering 1^T)` over the spatial grid.
    LocalAvg3 { projection: Mat, centering: Vec<f64> },
    /// `diag(scale * q) X` with `q` the current single query column.
    QueryGated { scale: f64 },
    /// `scale * sigmoid(mlp(u))`.
    GatedMlp { mlp: Mlp, scale: f64 },
    /// Gaussian-kernel Nystrom embedding `M^-1/2 k(anchors, x)`.
    Nystrom(NystromMap),
}

/// Pairwise similarity `s(k_i, q_j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Dot,
    NegSqEuclid,
    Cosine,
}

/// Attention function `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionRule {
    /// `1_p / p`, ignoring `S`.
    Uniform,
    /// `1_p`, ignoring `S`.
    Ones,
    /// Squared column norms of the current `X`, ignoring `S`.
    SquaredColumnNorms,
    /// Column softmax of `S / scale`.
    ColSoftmax { scale: f64 },
    /// Row normalization of the column softmax of `S / scale`.
    SoftmaxThenRowNorm { scale: f64 },
    /// `k * Sinkhorn(exp(S / epsilon))`, so columns sum to one.
    Sinkhorn { epsilon: f64, tol: f64, max_iter: usize },
    /// Column normalization of the one-hot row argmax of `S`, ties to the lowest index.
    HardArgmax,
    /// `sigmoid(conv7(S)) * scale` with a single-channel `7 x 7` kernel.
    SigmoidConv { kernel: Vec<f64>, bias: f64, scale: f64 },
}

impl AttentionRule {
    fn uses_similarity(&self) -> bool {
        !matches!(
            self,
            AttentionRule::Uniform | AttentionRule::Ones | AttentionRule::SquaredColumnNorms
        )
    }

    fn stochastic(&self) -> bool {
        matches!(
            self,
            AttentionRule::Uniform
                | AttentionRule::ColSoftmax { .. }
                | AttentionRule::Sinkhorn { .. }
                | AttentionRule::HardArgmax
        )
    }
}

/// Pooling function `f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolFn {
    FAlpha(AlphaParam),
    Lse { r: f64 },
}

/// Output mapping for `X` or `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum UpdateRule {
    Identity,
    Affine(Affine),
    /// `mlp(z)`.
    Mlp(Mlp),
    /// `mlp(W z)`.
    LinearThenMlp { w: Mat, mlp: Mlp },
    /// `l2`-normalization of every column.
    L2Normalize,
    /// `G = gru(z, U_prev)`, then `G + mlp(LN(G))`.
    GruMlp { gru: GruCell, mlp: Mlp },
}

/// Complete description of one pooler as an instance of the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolingSpec {
    pub k: usize,
    pub iters: usize,
    pub init: InitRule,
    pub query_map: MapRule,
    pub key_map: MapRule,
    pub value_map: MapRule,
    pub similarity: Similarity,
    pub attention: AttentionRule,
    pub pool_fn: PoolFn,
    pub feat_update: UpdateRule,
    pub pool_update: UpdateRule,
    /// Head count `m`; with `m > 1` the single query is split block-diagonally.
    pub heads: usize,
}

/// `S(K, Q)`, `p x k`, for keys `K` (`n x p`) and queries `Q` (`n x k`).
pub fn pairwise_similarity(k: &Mat, q: &Mat, kind: Similarity) -> Result<Mat> {
    if k.rows() != q.rows() {
        return Err(Error::shape(
            "pairwise_similarity",
            format!("keys {}x{} vs queries {}x{}", k.rows(), k.cols(), q.rows(), q.cols()),
        ));
    }
    match kind {
        Similarity::Dot => k.transpose().matmul(q),
        Similarity::NegSqEuclid => {
            let (kt, qt) = (k.transpose(), q.transpose());
            let mut s = Mat::zeros(k.cols(), q.cols());
            for i in 0..k.cols() {
                for j in 0..q.cols() {
                    s[(i, j)] = -sq_dist(kt.row(i), qt.row(j));
                }
            }
            Ok(s)
        }
        Similarity::Cosine => {
            let unit = |m: &Mat| -> Mat {
                let mut t = m.transpose();
                for i in 0..t.rows() {
                    if let Ok(v) = l2_normalize(t.row(i)) {
                        t.row_mut(i).copy_from_slice(&v);
                    } else {
                        t.row_mut(i).fill(0.0);
                    }
                }
                t
            };
            unit(k).matmul(&unit(q).transpose())
        }
    }
}

/// Block-diagonal expansion of a single query `q` (`d x 1`) into `d x m`:
/// column `i` keeps rows of head `i` and is zero elsewhere.
pub fn block_diagonal_query(q: &Mat, m: usize) -> Result<Mat> {
    let d = q.rows();
    if q.cols() != 1 || m == 0 || !d.is_multiple_of(m) {
        return Err(Error::shape(
            "block_diagonal_query",
            format!("query {}x{} with {m} heads", d, q.cols()),
        ));
    }
    let dh = d / m;
    let mut out = Mat::zeros(d, m);
    for r in 0..d {
        out[(r, r / dh)] = q[(r, 0)];
    }
    Ok(out)
}

/// Inverse of the head layout: row `r` of the result is `Z[r, head(r)]`.
pub fn merge_diagonal_blocks(z: &Mat, m: usize) -> Result<Mat> {
    let d = z.rows();
    if z.cols() != m || !d.is_multiple_of(m) {
        return Err(Error::shape(
            "merge_diagonal_blocks",
            format!("pooled {}x{} with {m} heads", d, z.cols()),
        ));
    }
    let dh = d / m;
    Ok(Mat::col_vector(&(0..d).map(|r| z[(r, r / dh)]).collect::<Vec<_>>()))
}

fn at_stage(stage: &'static str, iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Shape { op, detail } => Error::Shape {
            op: "run_pooling",
            detail: format!("stage {stage}, iteration {iteration}: {op}: {detail}"),
        },
        other => other,
    }
}

fn init_pooled(spec: &PoolingSpec, x: &Mat) -> Result<Mat> {
    let u = match &spec.init {
        InitRule::Gap => {
            if spec.k != 1 {
                return Err(Error::contract(format!("GAP initialization needs k = 1, got {}", spec.k)));
            }
            x.row_mean()
        }
        InitRule::DataColumns(idx) => x.select_cols(idx)?,
        InitRule::Given(u) => u.clone(),
        InitRule::SeededNormal { mu, sigma, seed } => {
            if mu.len() != sigma.len() {
                return Err(Error::shape("init", "mu and sigma lengths differ"));
            }
            let z = normal_mat(&mut seeded(*seed), mu.len(), spec.k, 1.0);
            let mut u = z.diag_left(sigma)?;
            for i in 0..u.rows() {
                for v in u.row_mut(i) {
                    *v += mu[i];
                }
            }
            u
        }
    };
    if u.cols() != spec.k {
        return Err(Error::shape("init", format!("U0 has {} columns, k = {}", u.cols(), spec.k)));
    }
    Ok(u)
}

fn apply_map(rule: &MapRule, m: &Mat, grid: (usize, usize), query: Option<&Mat>) -> Result<Mat> {
    match rule {
        MapRule::Identity => Ok(m.clone()),
        MapRule::Linear(w) => w.matmul(m),
        MapRule::LayerNormThen(inner) => apply_map(inner, &layernorm_cols(m, LN_EPS)?, grid, query),
        MapRule::ShiftMin(inner) => {
            let v = apply_map(inner, m, grid, query)?;
            let lo = v.min();
            Ok(v.add_scalar(-lo))
        }
        MapRule::LocalAvg3 {
            projection,
            centering,
        } => {
            if centering.len() != m.rows() {
                return Err(Error::shape("LocalAvg3", "centering length differs from d"));
            }
            let mut c = m.clone();
            for (i, &ci) in centering.iter().enumerate() {
                for v in c.row_mut(i) {
                    *v -= ci;
                }
            }
            projection.matmul(&avg3(&c, grid.0, grid.1)?)
        }
        MapRule::QueryGated { scale } => {
            let q = query.ok_or_else(|| Error::contract("query-gated value map needs a query"))?;
            if q.cols() != 1 {
                return Err(Error::shape("QueryGated", "needs a single query column"));
            }
            let gate: Vec<f64> = q.col(0).iter().map(|v| v * scale).collect();
            m.diag_left(&gate)
        }
        MapRule::GatedMlp { mlp, scale } => Ok(mlp.apply(m)?.sigmoid().scale(*scale)),
        MapRule::Nystrom(map) => map.apply(m),
    }
}

fn attention(rule: &AttentionRule, s: Option<&Mat>, x: &Mat, grid: (usize, usize), k: usize) -> Result<Mat> {
    let p = x.cols();
    let need = || s.ok_or_else(|| Error::contract("attention rule needs similarities"));
    match rule {
        AttentionRule::Uniform => Ok(Mat::filled(p, k, 1.0 / p as f64)),
        AttentionRule::Ones => Ok(Mat::filled(p, k, 1.0)),
        AttentionRule::SquaredColumnNorms => {
            let t = x.transpose();
            let a: Vec<f64> = (0..p).map(|j| t.row(j).iter().map(|v| v * v).sum()).collect();
            let mut out = Mat::zeros(p, k);
            for j in 0..k {
                out.set_col(j, &a);
            }
            Ok(out)
        }
        AttentionRule::ColSoftmax { scale } => col_softmax(need()?, *scale),
        AttentionRule::SoftmaxThenRowNorm { scale } => eta_norm(&col_softmax(need()?, *scale)?, Axis::Rows),
        AttentionRule::Sinkhorn {
            epsilon,
            tol,
            max_iter,
        } => {
            let cost = need()?.scale(-1.0);
            let params = SinkhornParams {
                epsilon: *epsilon,
                tol: *tol,
                max_iter: *max_iter,
            };
            let plan = sinkhorn(&cost, &params)?;
            Ok(plan.scale(cost.cols() as f64))
        }
        AttentionRule::HardArgmax => {
            let s = need()?;
            let mut m = Mat::zeros(s.rows(), s.cols());
            for i in 0..s.rows() {
                let row = s.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                m[(i, best)] = 1.0;
            }
            eta_norm(&m, Axis::Cols)
        }
        AttentionRule::SigmoidConv { kernel, bias, scale } => {
            let s = need()?;
            if s.cols() != 1 {
                return Err(Error::shape("SigmoidConv", "needs a single similarity column"));
            }
            let conv = conv7(&[s.col(0)], kernel, *bias, grid.0, grid.1)?;
            Ok(Mat::col_vector(&conv).sigmoid().scale(*scale))
        }
    }
}

fn update(rule: &UpdateRule, z: &Mat, prev: &Mat) -> Result<Mat> {
    match rule {
        UpdateRule::Identity => Ok(z.clone()),
        UpdateRule::Affine(a) => a.apply(z),
        UpdateRule::Mlp(mlp) => mlp.apply(z),
        UpdateRule::LinearThenMlp { w, mlp } => mlp.apply(&w.matmul(z)?),
        UpdateRule::L2Normalize => {
            let mut out = z.clone();
            for j in 0..z.cols() {
                let c = l2_normalize(&z.col(j)).map_err(|_| Error::DegenerateMass {
                    op: "l2 output normalization",
                    axis: "column",
                    index: j,
                })?;
                out.set_col(j, &c);
            }
            Ok(out)
        }
        UpdateRule::GruMlp { gru, mlp } => {
            let g = gru.step(z, prev)?;
            g.add(&mlp.apply(&layernorm_cols(&g, LN_EPS)?)?)
        }
    }
}

/// Executes the generic pooling loop.
pub fn run_pooling(spec: &PoolingSpec, fm: &FeatureMap) -> Result<PooledSet> {
    if spec.k == 0 || spec.iters == 0 || spec.heads == 0 {
        return Err(Error::contract("k, iters and heads must all be at least 1"));
    }
    if spec.heads > 1 && spec.k != 1 {
        return Err(Error::contract("multi-head pooling needs k = 1"));
    }
    fm.x().ensure_finite("run_pooling")?;
    let grid = (fm.width(), fm.height());
    let mut x = fm.x().clone();
    let mut u = init_pooled(spec, &x).map_err(at_stage("init", 0))?;
    let mut last_a = None;

    for t in 0..spec.iters {
        let mut q = apply_map(&spec.query_map, &u, grid, None).map_err(at_stage("query", t))?;
        let gate = q.clone();
        if spec.heads > 1 {
            q = block_diagonal_query(&q, spec.heads).map_err(at_stage("head split", t))?;
        }
        let s = if spec.attention.uses_similarity() {
            let kmat = apply_map(&spec.key_map, &x, grid, None).map_err(at_stage("key", t))?;
            Some(pairwise_similarity(&kmat, &q, spec.similarity).map_err(at_stage("similarity", t))?)
        } else {
            None
        };
        let a = attention(&spec.attention, s.as_ref(), &x, grid, q.cols()).map_err(at_stage("attention", t))?;
        let v = apply_map(&spec.value_map, &x, grid, Some(&gate)).map_err(at_stage("value", t))?;
        let mut z = match spec.pool_fn {
            PoolFn::FAlpha(alpha) => weighted_generalized_mean(&v, &a, alpha),
            PoolFn::Lse { r } => lse_pool(&v, &a, r),
        }
        .map_err(at_stage("pool", t))?;
        if spec.heads > 1 {
            z = merge_diagonal_blocks(&z, spec.heads).map_err(at_stage("head merge", t))?;
        }
        x = update(&spec.feat_update, &x, &x).map_err(at_stage("feature update", t))?;
        u = update(&spec.pool_update, &z, &u).map_err(at_stage("pool update", t))?;
        last_a = Some(a);
    }

    u.ensure_finite("run_pooling")?;
    let a = last_a.expect("at least one iteration");
    let a = if spec.heads > 1 { a.row_mean() } else { a };
    Ok(PooledSet {
        u,
        attention: Some(AttentionMatrix {
            a,
            stochastic_cols: spec.attention.stochastic(),
        }),
    })
}
