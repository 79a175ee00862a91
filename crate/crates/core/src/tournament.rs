//! Side-by-side comparison of every pooler on synthetic clustered features.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand_distr::{Distribution, Normal};

use crate::cluster_poolers::distortion;
use crate::error::{Error, Result};
use crate::framework::{FeatureMap, PooledSet};
use crate::matcore::Mat;
use crate::methods::{run_method, Method};
use crate::rng::{seeded, uniform_mat};
use crate::tensor_io::RunConfig;

/// Synthetic suite settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TournamentConfig {
    pub d: usize,
    pub p: usize,
    pub k_clusters: usize,
    pub trials: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
}

impl Default for TournamentConfig {
    fn default() -> Self {
        Self {
            d: 16,
            p: 64,
            k_clusters: 4,
            trials: 3,
            seed: 0,
            methods: Method::ALL.to_vec(),
        }
    }
}

/// Averages over trials for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct TournamentRow {
    pub method: Method,
    /// Frobenius norm of the pooled set.
    pub norm: f64,
    /// `sum_i min_j |x_i - u_j|^2` of the pooled set against the input.
    pub distortion: f64,
    /// Mean Shannon entropy of the normalized attention columns; `None` without attention.
    pub entropy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TournamentReport {
    pub rows: Vec<TournamentRow>,
}

impl TournamentReport {
    /// Tab-separated table with a header row. Wall time is included only on request.
    pub fn to_tsv(&self, timing: bool) -> String {
        let mut out = String::from("method\tnorm\tdistortion\tentropy");
        if timing {
            out.push_str("\tseconds");
        }
        out.push('\n');
        for r in &self.rows {
            let entropy = r.entropy.map_or_else(|| "-".to_string(), |e| format!("{e:.9}"));
            let _ = write!(out, "{}\t{:.9}\t{:.9}\t{}", r.method, r.norm, r.distortion, entropy);
            if timing {
                let _ = write!(out, "\t{:.6}", r.seconds);
            }
            out.push('\n');
        }
        out
    }
}

/// Grid `W x H` with `H` the largest divisor of `p` not above `sqrt(p)`.
pub fn grid_for(p: usize) -> (usize, usize) {
    let h = (1..=p).take_while(|h| h * h <= p).filter(|&h| p.is_multiple_of(h)).last().unwrap_or(1);
    (p / h, h)
}

/// Nonnegative features around `k` random centers, one instance per trial.
pub fn synthetic_suite(cfg: &TournamentConfig) -> Result<Vec<FeatureMap>> {
    if cfg.d == 0 || cfg.p == 0 || cfg.k_clusters == 0 || cfg.k_clusters > cfg.p {
        return Err(Error::contract(format!(
            "tournament needs d, p >= 1 and 1 <= k-clusters <= p, got d = {}, p = {}, k = {}",
            cfg.d, cfg.p, cfg.k_clusters
        )));
    }
    let (w, h) = grid_for(cfg.p);
    let noise = Normal::new(0.0, 0.3).expect("valid deviation");
    (0..cfg.trials)
        .map(|t| {
            let mut rng = seeded(cfg.seed.wrapping_add(t as u64));
            let centers = uniform_mat(&mut rng, cfg.d, cfg.k_clusters, 0.0, 2.0);
            let mut x = Mat::zeros(cfg.d, cfg.p);
            for j in 0..cfg.p {
                let c = centers.col(j % cfg.k_clusters);
                let col: Vec<f64> = c.iter().map(|m| (m + noise.sample(&mut rng)).max(0.0)).collect();
                x.set_col(j, &col);
            }
            FeatureMap::new(x, w, h)
        })
        .collect()
}

/// The configuration used for `method` within the suite.
pub fn method_config(cfg: &TournamentConfig, method: Method) -> RunConfig {
    RunConfig {
        method,
        seed: cfg.seed,
        k: method.multi_vector().then_some(cfg.k_clusters),
        ..RunConfig::default()
    }
}

pub fn run_one(cfg: &TournamentConfig, method: Method, fm: &FeatureMap) -> Result<PooledSet> {
    run_method(&method_config(cfg, method), fm, BTreeMap::new())
}

fn entropy(a: &Mat) -> f64 {
    let mut total = 0.0;
    for j in 0..a.cols() {
        let col = a.col(j);
        let s: f64 = col.iter().sum();
        if s > 0.0 {
            total -= col.iter().filter(|&&v| v > 0.0).map(|v| (v / s) * (v / s).ln()).sum::<f64>();
        }
    }
    total / a.cols().max(1) as f64
}

pub fn run_tournament(cfg: &TournamentConfig) -> Result<TournamentReport> {
    let suite = synthetic_suite(cfg)?;
    let n = suite.len().max(1) as f64;
    let mut rows = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let mut row = TournamentRow {
            method,
            norm: 0.0,
            distortion: 0.0,
            entropy: Some(0.0),
            seconds: 0.0,
        };
        for fm in &suite {
            let start = Instant::now();
            let out = run_one(cfg, method, fm)?;
            row.seconds += start.elapsed().as_secs_f64();
            row.norm += out.u.frobenius_norm() / n;
            row.distortion += distortion(fm.x(), &out.u)? / n;
            row.entropy = match (&out.attention, row.entropy) {
                (Some(att), Some(e)) => Some(e + entropy(&att.a) / n),
                _ => None,
            };
        }
        rows.push(row);
    }
    Ok(TournamentReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(grid_for(64), (8, 8));
        assert_eq!(grid_for(12), (4, 3));
        assert_eq!(grid_for(7), (7, 1));
        assert_eq!(grid_for(1), (1, 1));
    }

    #[test]
    fn gap_row_matches_closed_form_distortion() {
        let cfg = TournamentConfig {
            methods: vec![Method::Gap],
            ..TournamentConfig::default()
        };
        let report = run_tournament(&cfg).unwrap();
        let mut expected = 0.0;
        for fm in synthetic_suite(&cfg).unwrap() {
            let x = fm.x();
            let mean: Vec<f64> = (0..x.rows()).map(|i| x.row(i).iter().sum::<f64>() / x.cols() as f64).collect();
            let j: f64 = (0..x.cols())
                .map(|c| x.col(c).iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>())
                .sum();
            expected += j / cfg.trials as f64;
        }
        assert!((report.rows[0].distortion - expected).abs() < 1e-9 * expected);
        let p = cfg.p as f64;
        assert!((report.rows[0].entropy.unwrap() - p.ln()).abs() < 1e-12);
    }

    #[test]
    fn tsv_is_deterministic_and_ordered() {
        let cfg = TournamentConfig {
            methods: vec![Method::SimPool, Method::Gap, Method::Max],
            trials: 2,
            ..TournamentConfig::default()
        };
        let a = run_tournament(&cfg).unwrap().to_tsv(false);
        let b = run_tournament(&cfg).unwrap().to_tsv(false);
        assert_eq!(a, b);
        let names: Vec<&str> = a.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
        assert_eq!(names, ["simpool", "gap", "max"]);
        assert!(a.lines().nth(3).unwrap().ends_with("\t-"));
    }

    #[test]
    fn bad_suite_is_rejected() {
        let cfg = TournamentConfig {
            k_clusters: 100,
            ..TournamentConfig::default()
        };
        assert!(synthetic_suite(&cfg).is_err());
    }
}
