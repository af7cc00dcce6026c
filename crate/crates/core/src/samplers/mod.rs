//! SDE path samplers.
//!
//! Every sampler implements [`Sampler`] and is registered by name in a
//! [`SamplerRegistry`]; configs and the CLI pick one at runtime.
//!
//! | name   | output             | driven by                      |
//! |--------|--------------------|--------------------------------|
//! | `em`   | points             | parabola increments `b`        |
//! | `alg2` | sampled points     | parabola pieces + posterior draws |
//! | `alg3` | Gaussian marginals | parabola pieces                |
//! | `alg4` | sampled points     | posterior draws only           |

mod coupled;
mod em;
mod gaussian;
mod marginalised;
mod mixture;

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::brownian::PiecewiseParabola;
use crate::error::{Error, Result};
use crate::filter::{Innovation, Scheme};
use crate::models::SdeModel;
use crate::prior::GaussMarkovPrior;
use crate::rng::NoiseStream;

pub use coupled::{coupled_experiment, coupled_path, initial_point, map_coupled, CoupledPath};
pub use em::{em_run, EmSampler};
pub use gaussian::{alg2_run, GaussianSampler};
pub use marginalised::{alg4_run, MarginalisedSampler};
pub use mixture::{alg3_run, MixtureSampler};

/// Regular grid `t_k = k delta`, `k = 0..=steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    horizon: f64,
    delta: f64,
    steps: usize,
}

impl GridSpec {
    pub fn new(horizon: f64, delta: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if !(delta > 0.0 && delta <= horizon) {
            return Err(Error::invalid(format!("step must be in (0, horizon], got {delta}")));
        }
        let steps = (horizon / delta).round();
        if (steps * delta - horizon).abs() > 1e-9 * horizon {
            return Err(Error::invalid(format!("step {delta} does not divide horizon {horizon}")));
        }
        Ok(Self { horizon, delta, steps: steps as usize })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.delta
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    /// Grid refined by an integer factor.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("refinement factor must be >= 1"));
        }
        Ok(Self { horizon: self.horizon, delta: self.delta / factor as f64, steps: self.steps * factor })
    }

    pub(crate) fn check_pieces(&self, coeffs: &PiecewiseParabola) -> Result<()> {
        if coeffs.len() != self.steps || (coeffs.delta() - self.delta).abs() > 1e-12 * self.delta {
            return Err(Error::invalid(format!(
                "parabola stream has {} pieces of length {}, grid needs {} of length {}",
                coeffs.len(),
                coeffs.delta(),
                self.steps,
                self.delta
            )));
        }
        Ok(())
    }
}

/// Output of one sampler run on one path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathRecord {
    pub times: Vec<f64>,
    /// Sampled points, or posterior means for Gaussian output.
    pub values: Vec<DVector<f64>>,
    /// Posterior covariance of the solution block at each time (Gaussian output only).
    pub covariances: Option<Vec<DMatrix<f64>>>,
    /// Filter innovations, one per step.
    pub innovations: Vec<Innovation>,
}

impl PathRecord {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_gaussian(&self) -> bool {
        self.covariances.is_some()
    }

    pub fn terminal(&self) -> &DVector<f64> {
        self.values.last().expect("non-empty path record")
    }

    /// Per-coordinate marginal variances, when available.
    pub fn variances(&self) -> Option<Vec<DVector<f64>>> {
        self.covariances.as_ref().map(|c| c.iter().map(|p| p.diagonal()).collect())
    }
}

/// Settings shared by the filter-based samplers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterSettings {
    pub prior: GaussMarkovPrior,
    pub scheme: Scheme,
    /// Measurement noise `R = c delta^2 I`.
    pub noise_coeff: f64,
}

impl FilterSettings {
    pub fn new(prior: GaussMarkovPrior, scheme: Scheme) -> Self {
        Self { prior, scheme, noise_coeff: 0.0 }
    }

    pub(crate) fn measurement_noise(&self, d: usize, delta: f64) -> DMatrix<f64> {
        DMatrix::identity(d, d) * (self.noise_coeff * delta * delta)
    }
}

/// Everything a sampler may consume for one path.
pub struct PathInput<'a> {
    pub model: &'a SdeModel,
    pub grid: &'a GridSpec,
    pub x0: &'a DVector<f64>,
    pub coeffs: &'a PiecewiseParabola,
    /// `d` normals per interval, for posterior draws.
    pub sampling: &'a mut NoiseStream,
}

/// A path sampler selectable by name.
pub trait Sampler: Send + Sync {
    fn name(&self) -> &'static str;

    /// False when the sampler ignores the parabola pieces (and so the coupling).
    fn uses_coefficients(&self) -> bool {
        true
    }

    /// True when the output is a sequence of Gaussian marginals.
    fn gaussian_output(&self) -> bool {
        false
    }

    fn run(&self, input: PathInput<'_>) -> Result<PathRecord>;
}

impl fmt::Debug for dyn Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sampler({})", self.name())
    }
}

pub type SamplerFactory = fn(FilterSettings) -> Box<dyn Sampler>;

/// Name-to-constructor table for samplers.
#[derive(Clone)]
pub struct SamplerRegistry {
    entries: BTreeMap<&'static str, SamplerFactory>,
}

impl Default for SamplerRegistry {
    fn default() -> Self {
        let mut r = Self { entries: BTreeMap::new() };
        r.register("em", |_| Box::new(EmSampler));
        r.register("alg2", |s| Box::new(GaussianSampler::new(s)));
        r.register("alg3", |s| Box::new(MixtureSampler::new(s)));
        r.register("alg4", |s| Box::new(MarginalisedSampler::new(s)));
        r
    }
}

impl SamplerRegistry {
    pub fn register(&mut self, name: &'static str, factory: SamplerFactory) {
        self.entries.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }

    pub fn build(&self, name: &str, settings: FilterSettings) -> Result<Box<dyn Sampler>> {
        let factory = self.entries.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown sampler `{name}` (available: {})",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        Ok(factory(settings))
    }
}

/// Interleaves solution values and derivatives, `(x_0, v_0, x_1, v_1, ...)`.
pub(crate) fn interleave(x: &DVector<f64>, v: &DVector<f64>, extra: usize) -> DVector<f64> {
    let d = x.len();
    let mut out = DVector::zeros(2 * d + extra);
    for i in 0..d {
        out[2 * i] = x[i];
        out[2 * i + 1] = v[i];
    }
    out
}

/// Mean and covariance of the solution entries `x_i` of an interleaved state.
pub(crate) fn solution_block(mean: &DVector<f64>, cov: &DMatrix<f64>, d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let m = DVector::from_iterator(d, (0..d).map(|i| mean[2 * i]));
    let p = DMatrix::from_fn(d, d, |i, j| cov[(2 * i, 2 * j)]);
    (m, p)
}

/// Square root `L` with `L L^T = cov`, tolerating positive semi-definite input.
pub(crate) fn covariance_sqrt(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = cov.clone().cholesky() {
        return ch.unpack();
    }
    let eig = cov.clone().symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
}

/// Draws from `N(mean, cov)` using the `d` normals of interval `k`.
pub(crate) fn draw(mean: &DVector<f64>, cov: &DMatrix<f64>, stream: &mut NoiseStream, k: usize) -> DVector<f64> {
    let d = mean.len();
    let mut z = DVector::zeros(d);
    stream.fill_interval(k as u64, z.as_mut_slice());
    mean + covariance_sqrt(cov) * z
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_validation() {
        let g = GridSpec::new(1.0, 0.0625).unwrap();
        assert_eq!(g.steps(), 16);
        assert_eq!(g.times().last().copied(), Some(1.0));
        assert!(GridSpec::new(1.0, 0.3).is_err());
        assert!(GridSpec::new(1.0, 0.0).is_err());
        assert_eq!(g.refine(16).unwrap().steps(), 256);
    }

    #[test]
    fn registry_lists_and_rejects() {
        let r = SamplerRegistry::default();
        assert_eq!(r.names().collect::<Vec<_>>(), vec!["alg2", "alg3", "alg4", "em"]);
        let s = FilterSettings::new(GaussMarkovPrior::ibm(1.0).unwrap(), Scheme::Ekf0);
        assert_eq!(r.build("alg3", s).unwrap().name(), "alg3");
        assert!(r.build("alg3", s).unwrap().gaussian_output());
        assert!(!r.build("alg4", s).unwrap().uses_coefficients());
        assert!(matches!(r.build("rk4", s), Err(Error::Config(_))));
    }

    #[test]
    fn sqrt_of_singular_covariance() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = covariance_sqrt(&c);
        approx::assert_relative_eq!(&l * l.transpose(), c, epsilon = 1e-12);
    }
}
