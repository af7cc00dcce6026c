use nalgebra::{DMatrix, DVector};

use super::{solution_block, FilterSettings, GridSpec, PathInput, PathRecord, Sampler};
use crate::brownian::PiecewiseParabola;
use crate::error::Result;
use crate::filter::{ode_measurement, predict, update, GaussianState, ParabolaField, Scheme, StateTransition};
use crate::models::SdeModel;
use crate::prior::transition;

/// Interleaved start state for one interval.
///
/// The EKF1 rule linearises `f` around the carried mean, so the derivative
/// block picks up `P J^T` and `J P J^T`. EKF0 leaves both at zero.
fn restart(
    model: &SdeModel,
    field: &ParabolaField<'_>,
    scheme: Scheme,
    mx: &DVector<f64>,
    pxx: &DMatrix<f64>,
    t: f64,
) -> Result<GaussianState> {
    let d = model.dim();
    let f = field.eval(mx, t);
    let mut mean = DVector::zeros(2 * d);
    let mut cov = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        mean[2 * i] = mx[i];
        mean[2 * i + 1] = f[i];
        for j in 0..d {
            cov[(2 * i, 2 * j)] = pxx[(i, j)];
        }
    }
    if scheme == Scheme::Ekf1 {
        let jac = model.jacobian(mx, t)?;
        let p01 = pxx * jac.transpose();
        let p11 = &jac * &p01;
        for i in 0..d {
            for j in 0..d {
                cov[(2 * i, 2 * j + 1)] = p01[(i, j)];
                cov[(2 * j + 1, 2 * i)] = p01[(i, j)];
                cov[(2 * i + 1, 2 * j + 1)] = p11[(i, j)];
            }
        }
    }
    Ok(GaussianState { mean, cov })
}

/// Gaussian mixture filter: carries the solution mean and covariance across
/// intervals instead of sampling, giving one Gaussian marginal per grid time
/// conditional on the parabola stream.
///
/// Only per-time marginals are recorded; cross-time covariances are not tracked.
pub fn alg3_run(
    model: &SdeModel,
    grid: &GridSpec,
    settings: &FilterSettings,
    coeffs: &PiecewiseParabola,
) -> Result<PathRecord> {
    grid.check_pieces(coeffs)?;
    let d = model.dim();
    let pair = transition(&settings.prior, grid.delta())?;
    let step = StateTransition::per_coordinate(&pair, d, 0);
    let r = settings.measurement_noise(d, grid.delta());

    let mut mx = model.initial().mean().clone();
    let mut pxx = model.initial().cov();
    let mut values = Vec::with_capacity(grid.steps() + 1);
    let mut covariances = Vec::with_capacity(grid.steps() + 1);
    let mut innovations = Vec::with_capacity(grid.steps());
    values.push(mx.clone());
    covariances.push(pxx.clone());
    for k in 0..grid.steps() {
        let (t0, t1) = (grid.time(k), grid.time(k + 1));
        let field = ParabolaField::new(model, coeffs.piece(k));
        let start = restart(model, &field, settings.scheme, &mx, &pxx, t0)?;
        let predicted = predict(&start, &step)?;
        let mm = ode_measurement(model, field, settings.scheme)?.with_noise(r.clone());
        let (post, inn) = update(&predicted, &mm, t1)?;
        (mx, pxx) = solution_block(&post.mean, &post.cov, d);
        values.push(mx.clone());
        covariances.push(pxx.clone());
        innovations.push(inn);
    }
    Ok(PathRecord { times: grid.times(), values, covariances: Some(covariances), innovations })
}

/// Registry wrapper for [`alg3_run`]; ignores the initial point and sampling stream.
#[derive(Clone, Copy, Debug)]
pub struct MixtureSampler {
    settings: FilterSettings,
}

impl MixtureSampler {
    pub fn new(settings: FilterSettings) -> Self {
        Self { settings }
    }
}

impl Sampler for MixtureSampler {
    fn name(&self) -> &'static str {
        "alg3"
    }

    fn gaussian_output(&self) -> bool {
        true
    }

    fn run(&self, input: PathInput<'_>) -> Result<PathRecord> {
        alg3_run(input.model, input.grid, &self.settings, input.coeffs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{affine_model, fhn_model, FhnParams, InitialState, ScalarAffine};
    use crate::prior::GaussMarkovPrior;
    use crate::rng::{NoiseStream, Purpose};
    use crate::samplers::alg2_run;
    use approx::assert_relative_eq;

    fn coeffs(grid: &GridSpec, m: usize, seed: u64) -> PiecewiseParabola {
        let mut s = NoiseStream::new(seed, 0, 0, Purpose::Coefficients, 2 * m);
        PiecewiseParabola::sample(&mut s, grid.steps(), grid.delta(), m).unwrap()
    }

    #[test]
    fn first_step_matches_gaussian_sampler_posterior() {
        let fhn = fhn_model(FhnParams::default()).unwrap();
        let grid = GridSpec::new(1.0, 0.0625).unwrap();
        let c = coeffs(&grid, 1, 3);
        for scheme in [Scheme::Ekf0, Scheme::Ekf1] {
            // a vanishing prior scale collapses the alg2 draw onto its posterior mean
            let tiny = FilterSettings::new(GaussMarkovPrior::ibm(1e-12).unwrap(), scheme);
            let mix = alg3_run(&fhn, &grid, &tiny, &c).unwrap();
            let mut ss = NoiseStream::new(3, 0, 0, Purpose::Sampling, 2);
            let g = alg2_run(&fhn, &grid, &tiny, &c, &DVector::zeros(2), &mut ss).unwrap();
            assert_relative_eq!(mix.values[1], g.values[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn ekf0_means_ignore_carried_variance() {
        // EKF0 never couples the carried solution variance into the derivative,
        // so the gain and hence the means match alg2 in the vanishing-noise limit
        let fhn = fhn_model(FhnParams::default()).unwrap();
        let grid = GridSpec::new(1.0, 0.0625).unwrap();
        let c = coeffs(&grid, 1, 3);
        let tiny = FilterSettings::new(GaussMarkovPrior::ibm(1e-12).unwrap(), Scheme::Ekf0);
        let mix = alg3_run(&fhn, &grid, &tiny, &c).unwrap();
        let mut ss = NoiseStream::new(3, 0, 0, Purpose::Sampling, 2);
        let g = alg2_run(&fhn, &grid, &tiny, &c, &DVector::zeros(2), &mut ss).unwrap();
        for k in 0..=grid.steps() {
            assert_relative_eq!(mix.values[k], g.values[k], epsilon = 1e-10);
        }
    }

    #[test]
    fn variances_positive_after_first_step() {
        let fhn = fhn_model(FhnParams::default()).unwrap();
        let grid = GridSpec::new(1.0, 0.0625).unwrap();
        let c = coeffs(&grid, 1, 9);
        for scheme in [Scheme::Ekf0, Scheme::Ekf1] {
            let s = FilterSettings::new(GaussMarkovPrior::ibm(1.0).unwrap(), scheme);
            let rec = alg3_run(&fhn, &grid, &s, &c).unwrap();
            let vars = rec.variances().unwrap();
            assert!(vars[0].iter().all(|v| *v == 0.0));
            for v in &vars[1..] {
                assert!(v.iter().all(|x| *x > 0.0));
            }
        }
    }

    #[test]
    fn brownian_variance_accumulates() {
        let p = ScalarAffine { g: 0.0, lambda: 0.0, sigma: 1.0 };
        let model = affine_model(p.params(), InitialState::Fixed(DVector::zeros(1)), 1.0).unwrap();
        let grid = GridSpec::new(1.0, 0.125).unwrap();
        let c = coeffs(&grid, 1, 4);
        let s = FilterSettings::new(GaussMarkovPrior::ibm(1.0).unwrap(), Scheme::Ekf0);
        let rec = alg3_run(&model, &grid, &s, &c).unwrap();
        let per_step = grid.delta().powi(3) / 12.0;
        let mut sum = 0.0;
        for k in 0..grid.steps() {
            sum += c.piece(k).b[0];
            assert_relative_eq!(rec.values[k + 1][0], sum, epsilon = 1e-13);
            assert_relative_eq!(rec.covariances.as_ref().unwrap()[k + 1][(0, 0)], per_step * (k + 1) as f64, max_relative = 1e-10);
        }
    }
}
