//! TOML experiment configuration.
//!
//! ```toml
//! sampler = "alg2"        # em | alg2 | alg3 | alg4
//! scheme = "ekf0"         # ekf0 | ekf1
//! paths = 5000
//! seed = 1
//! out = "out"
//! noise_coeff = 0.0       # R = noise_coeff * delta^2 * I
//! full_scale = false     # N = 1e5 and deltas down to 2^-10
//!
//! [model]
//! name = "fhn"            # fhn | ou | brownian
//!
//! [grid]
//! horizon = 1.0
//! deltas = [0.0625, 0.03125, 0.015625, 0.0078125, 0.00390625]
//!
//! [prior]
//! kind = "ibm"            # ibm | ioup
//! theta = 0.0
//! eta = 1.0
//! ```
//!
//! Every key is optional; missing keys take the values shown.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::Scheme;
use crate::models::{affine_model, fhn_model, FhnParams, InitialState, ScalarAffine, SdeModel};
use crate::prior::GaussMarkovPrior;
use crate::samplers::{FilterSettings, SamplerRegistry};

pub const FULL_SCALE_PATHS: usize = 100_000;
pub const FULL_SCALE_MIN_EXPONENT: i32 = 10;

/// Drift and noise model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelConfig {
    /// Stochastic FitzHugh-Nagumo started at the origin.
    Fhn {
        #[serde(default = "fhn_eps")]
        eps: f64,
        #[serde(default)]
        s: f64,
        #[serde(default = "fhn_gamma")]
        gamma: f64,
        #[serde(default = "fhn_alpha")]
        alpha: f64,
        #[serde(default = "fhn_sigma")]
        sigma: f64,
    },
    /// Scalar Ornstein-Uhlenbeck `dX = (g - lambda X) dt + sigma dB`.
    Ou {
        #[serde(default)]
        g: f64,
        #[serde(default = "one")]
        lambda: f64,
        #[serde(default = "one")]
        sigma: f64,
        #[serde(default)]
        x0: f64,
    },
    /// Scaled scalar Brownian motion.
    Brownian {
        #[serde(default = "one")]
        sigma: f64,
        #[serde(default)]
        x0: f64,
    },
}

fn one() -> f64 {
    1.0
}
fn fhn_eps() -> f64 {
    FhnParams::default().eps
}
fn fhn_gamma() -> f64 {
    FhnParams::default().gamma
}
fn fhn_alpha() -> f64 {
    FhnParams::default().alpha
}
fn fhn_sigma() -> f64 {
    FhnParams::default().sigma
}

impl Default for ModelConfig {
    fn default() -> Self {
        let p = FhnParams::default();
        ModelConfig::Fhn { eps: p.eps, s: p.s, gamma: p.gamma, alpha: p.alpha, sigma: p.sigma }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default = "desk_deltas")]
    pub deltas: Vec<f64>,
}

/// `2^-4, ..., 2^-8`.
pub fn desk_deltas() -> Vec<f64> {
    (4..=8).map(|e| 2f64.powi(-e)).collect()
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { horizon: 1.0, deltas: desk_deltas() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Ibm,
    Ioup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    #[serde(default = "ibm")]
    pub kind: PriorKind,
    #[serde(default)]
    pub theta: f64,
    #[serde(default = "one")]
    pub eta: f64,
}

fn ibm() -> PriorKind {
    PriorKind::Ibm
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { kind: PriorKind::Ibm, theta: 0.0, eta: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_sampler")]
    pub sampler: String,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub noise_coeff: f64,
    #[serde(default)]
    pub full_scale: bool,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub prior: PriorConfig,
}

fn default_sampler() -> String {
    "alg2".into()
}
fn default_scheme() -> Scheme {
    Scheme::Ekf0
}
fn default_paths() -> usize {
    5000
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sampler: default_sampler(),
            scheme: default_scheme(),
            paths: default_paths(),
            seed: 0,
            out: default_out(),
            noise_coeff: 0.0,
            full_scale: false,
            model: ModelConfig::default(),
            grid: GridConfig::default(),
            prior: PriorConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; parse errors carry the offending line and key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies the full-scale override. Idempotent, so the echo of a resolved
    /// config resolves to itself.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        if cfg.full_scale {
            cfg.paths = FULL_SCALE_PATHS;
            cfg.grid.deltas = (4..=FULL_SCALE_MIN_EXPONENT).map(|e| cfg.grid.horizon * 2f64.powi(-e)).collect();
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.paths == 0 {
            return bad("paths must be >= 1".into());
        }
        if !(self.grid.horizon > 0.0 && self.grid.horizon.is_finite()) {
            return bad(format!("grid.horizon must be positive, got {}", self.grid.horizon));
        }
        if self.grid.deltas.is_empty() {
            return bad("grid.deltas must not be empty".into());
        }
        for w in self.grid.deltas.windows(2) {
            if !(w[1] < w[0]) {
                return bad(format!("grid.deltas must be strictly descending, got {} then {}", w[0], w[1]));
            }
        }
        for &d in &self.grid.deltas {
            if !(d > 0.0 && d <= self.grid.horizon) {
                return bad(format!("grid.deltas entries must lie in (0, horizon], got {d}"));
            }
            let k = (self.grid.horizon / d).round();
            if (k * d - self.grid.horizon).abs() > 1e-9 * self.grid.horizon {
                return bad(format!("step {d} does not divide horizon {}", self.grid.horizon));
            }
        }
        if self.grid.deltas.len() > 64 {
            return bad("at most 64 step sizes are supported".into());
        }
        if !(self.noise_coeff >= 0.0 && self.noise_coeff.is_finite()) {
            return bad(format!("noise_coeff must be >= 0, got {}", self.noise_coeff));
        }
        if !SamplerRegistry::default().names().any(|n| n == self.sampler) {
            return bad(format!(
                "unknown sampler `{}` (available: {})",
                self.sampler,
                SamplerRegistry::default().names().collect::<Vec<_>>().join(", ")
            ));
        }
        match self.prior.kind {
            PriorKind::Ibm if self.prior.theta != 0.0 => {
                return bad(format!("prior.theta must be 0 for an ibm prior, got {}", self.prior.theta));
            }
            PriorKind::Ioup if !(self.prior.theta > 0.0) => {
                return bad(format!("prior.theta must be positive for an ioup prior, got {}", self.prior.theta));
            }
            _ => {}
        }
        self.build_prior()?;
        self.build_model()?;
        Ok(())
    }

    pub fn build_prior(&self) -> Result<GaussMarkovPrior> {
        GaussMarkovPrior::new(self.prior.theta, self.prior.eta).map_err(|e| Error::Config(format!("prior: {e}")))
    }

    pub fn build_model(&self) -> Result<SdeModel> {
        let horizon = self.grid.horizon;
        let wrap = |e: Error| Error::Config(format!("model: {e}"));
        let scalar = |p: ScalarAffine, x0: f64| {
            affine_model(p.params(), InitialState::Fixed(DVector::from_element(1, x0)), horizon)
        };
        match self.model.clone() {
            ModelConfig::Fhn { eps, s, gamma, alpha, sigma } => {
                fhn_model(FhnParams { eps, s, gamma, alpha, sigma }).and_then(|m| m.with_horizon(horizon))
            }
            ModelConfig::Ou { g, lambda, sigma, x0 } => scalar(ScalarAffine { g, lambda, sigma }, x0),
            ModelConfig::Brownian { sigma, x0 } => scalar(ScalarAffine { g: 0.0, lambda: 0.0, sigma }, x0),
        }
        .map_err(wrap)
    }

    pub fn filter_settings(&self) -> Result<FilterSettings> {
        Ok(FilterSettings { prior: self.build_prior()?, scheme: self.scheme, noise_coeff: self.noise_coeff })
    }
}
