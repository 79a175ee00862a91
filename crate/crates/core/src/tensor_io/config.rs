//! JSON run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::Mat;
use crate::meanfam::{GAMMA_CONV, GAMMA_TRANSFORMER};
use crate::methods::Method;

/// Network family hint that selects the default exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Convolutional,
    Transformer,
}

pub const DEFAULT_MASS: f64 = 0.6;
pub const DEFAULT_REDUCTION: usize = 4;
pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_LSE_R: f64 = 1.0;

/// Every knob of a pooling run. Absent optional values fall back to
/// per-method defaults when the run is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    pub family: Family,
    pub gamma: Option<f64>,
    pub k: Option<usize>,
    pub iters: Option<usize>,
    pub heads: usize,
    pub epsilon: f64,
    /// Log-sum-exp scale.
    pub r: f64,
    /// Bottleneck ratio of the SE/CBAM channel MLP.
    pub reduction: usize,
    pub seed: u64,
    /// Gaussian kernel width of the Nystrom embedding; identity embedding when absent.
    pub sigma: Option<f64>,
    pub layernorm: bool,
    pub simplified: bool,
    /// Weight-file paths keyed by role (`w_q`, `w_k`, `anchors`, ...).
    pub weights: BTreeMap<String, PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub attn_output: Option<PathBuf>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub mass: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::SimPool,
            family: Family::Convolutional,
            gamma: None,
            k: None,
            iters: None,
            heads: 1,
            epsilon: DEFAULT_EPSILON,
            r: DEFAULT_LSE_R,
            reduction: DEFAULT_REDUCTION,
            seed: 0,
            sigma: None,
            layernorm: true,
            simplified: true,
            weights: BTreeMap::new(),
            input: None,
            output: None,
            attn_output: None,
            width: None,
            height: None,
            mass: DEFAULT_MASS,
        }
    }
}

impl RunConfig {
    /// Explicit exponent, or 1.25 under the transformer hint and 2.0 otherwise.
    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(match self.family {
            Family::Transformer => GAMMA_TRANSFORMER,
            Family::Convolutional => GAMMA_CONV,
        })
    }

    /// Checks every numeric range.
    pub fn validate(&self) -> Result<()> {
        let g = self.gamma();
        if !(g > 0.0 && g <= 100.0) {
            return Err(Error::Range(format!("gamma must lie in (0, 100], got {g}")));
        }
        if self.k == Some(0) {
            return Err(Error::Range("k must be at least 1".into()));
        }
        if self.iters == Some(0) {
            return Err(Error::Range("iters must be at least 1".into()));
        }
        if self.heads == 0 {
            return Err(Error::Range("heads must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Range(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.r.abs() >= 1e-9 && self.r.is_finite()) {
            return Err(Error::Range(format!("r must be nonzero, got {}", self.r)));
        }
        if self.reduction == 0 {
            return Err(Error::Range("reduction must be at least 1".into()));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Range(format!("sigma must be positive, got {s}")));
            }
        }
        if !(self.mass > 0.0 && self.mass <= 1.0) {
            return Err(Error::Range(format!("mass must lie in (0, 1], got {}", self.mass)));
        }
        if self.width == Some(0) || self.height == Some(0) {
            return Err(Error::Range("width and height must be positive".into()));
        }
        Ok(())
    }

    /// Parses JSON text. Unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config {
            path: PathBuf::from("<inline>"),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads every weight file into memory, keyed by role.
    pub fn load_weights(&self) -> Result<BTreeMap<String, Mat>> {
        self.weights
            .iter()
            .map(|(role, path)| Ok((role.clone(), super::read_npy(path)?.to_mat()?)))
            .collect()
    }
}

/// Reads and validates a configuration file. Relative paths inside it are
/// resolved against the file's directory.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    cfg.weights.values_mut().for_each(fix);
    cfg.input.iter_mut().for_each(fix);
    cfg.output.iter_mut().for_each(fix);
    cfg.attn_output.iter_mut().for_each(fix);
    cfg.validate()?;
    Ok(cfg)
}
