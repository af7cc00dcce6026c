use nalgebra::{DMatrix, DVector};

use super::{draw, solution_block, FilterSettings, GridSpec, PathInput, PathRecord, Sampler};
use crate::brownian::SQRT6;
use crate::error::{Error, Result};
use crate::filter::{marginalised_dim, marginalised_measurement, predict, update, GaussianState, StateTransition};
use crate::models::SdeModel;
use crate::prior::transition;
use crate::rng::NoiseStream;

/// Joint start state over solution, derivative and parabola coefficients.
///
/// The derivative is `mu + sigma A_-` with `A_- = (b - sqrt6 i) / delta`, so
/// its covariance with the coefficients follows from `Var b = delta`,
/// `Var i = delta / 2`.
fn joint_start(model: &SdeModel, x: &DVector<f64>, t: f64, delta: f64) -> GaussianState {
    let (d, m) = (model.dim(), model.noise_dim());
    let n = marginalised_dim(model);
    let mu = model.drift(x, t);
    let sigma = model.diffusion(t);
    let sst = &sigma * sigma.transpose();
    let mut mean = DVector::zeros(n);
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..d {
        mean[2 * i] = x[i];
        mean[2 * i + 1] = mu[i];
        for j in 0..d {
            cov[(2 * i + 1, 2 * j + 1)] = 4.0 / delta * sst[(i, j)];
        }
        for j in 0..m {
            let (cb, ci) = (2 * d + 2 * j, 2 * d + 2 * j + 1);
            cov[(2 * i + 1, cb)] = sigma[(i, j)];
            cov[(cb, 2 * i + 1)] = sigma[(i, j)];
            cov[(2 * i + 1, ci)] = -0.5 * SQRT6 * sigma[(i, j)];
            cov[(ci, 2 * i + 1)] = -0.5 * SQRT6 * sigma[(i, j)];
        }
    }
    for j in 0..m {
        let (cb, ci) = (2 * d + 2 * j, 2 * d + 2 * j + 1);
        cov[(cb, cb)] = delta;
        cov[(ci, ci)] = 0.5 * delta;
    }
    GaussianState { mean, cov }
}

/// Marginalised filter: the parabola coefficients of each interval are part
/// of the filter state, so no Brownian approximation is ever sampled.
pub fn alg4_run(
    model: &SdeModel,
    grid: &GridSpec,
    settings: &FilterSettings,
    x0: &DVector<f64>,
    sampling: &mut NoiseStream,
) -> Result<PathRecord> {
    let d = model.dim();
    if x0.len() != d || sampling.normals_per_interval() != d {
        return Err(Error::dim("initial point or sampling stream does not match model dimension"));
    }
    let pair = transition(&settings.prior, grid.delta())?;
    let step = StateTransition::per_coordinate(&pair, d, 2 * model.noise_dim());
    let r = settings.measurement_noise(d, grid.delta());

    let mut x = x0.clone();
    let mut values = Vec::with_capacity(grid.steps() + 1);
    let mut innovations = Vec::with_capacity(grid.steps());
    values.push(x.clone());
    for k in 0..grid.steps() {
        let (t0, t1) = (grid.time(k), grid.time(k + 1));
        let start = joint_start(model, &x, t0, grid.delta());
        let predicted = predict(&start, &step)?;
        let mm = marginalised_measurement(model, settings.scheme, k, grid.delta())?.with_noise(r.clone());
        let (post, inn) = update(&predicted, &mm, t1)?;
        let (mean, cov) = solution_block(&post.mean, &post.cov, d);
        x = draw(&mean, &cov, sampling, k);
        values.push(x.clone());
        innovations.push(inn);
    }
    Ok(PathRecord { times: grid.times(), values, covariances: None, innovations })
}

/// Registry wrapper for [`alg4_run`]; ignores the parabola stream.
#[derive(Clone, Copy, Debug)]
pub struct MarginalisedSampler {
    settings: FilterSettings,
}

impl MarginalisedSampler {
    pub fn new(settings: FilterSettings) -> Self {
        Self { settings }
    }
}

impl Sampler for MarginalisedSampler {
    fn name(&self) -> &'static str {
        "alg4"
    }

    fn uses_coefficients(&self) -> bool {
        false
    }

    fn run(&self, input: PathInput<'_>) -> Result<PathRecord> {
        alg4_run(input.model, input.grid, &self.settings, input.x0, input.sampling)
    }
}
