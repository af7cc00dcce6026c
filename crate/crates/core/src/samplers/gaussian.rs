use nalgebra::DVector;

use super::{draw, interleave, solution_block, FilterSettings, GridSpec, PathInput, PathRecord, Sampler};
use crate::brownian::PiecewiseParabola;
use crate::error::{Error, Result};
use crate::filter::{ode_measurement, predict, update, GaussianState, ParabolaField, StateTransition};
use crate::models::SdeModel;
use crate::prior::transition;
use crate::rng::NoiseStream;

/// Gaussian SDE filter: one EKF step per parabola piece, then a draw of the
/// next point from the posterior solution marginal.
///
/// Each step starts from the point mass `(x_k, f_k(x_k, t_k))` using the
/// left-end derivative of the piece, and conditions at `t_{k+1}` on the
/// right-end derivative.
pub fn alg2_run(
    model: &SdeModel,
    grid: &GridSpec,
    settings: &FilterSettings,
    coeffs: &PiecewiseParabola,
    x0: &DVector<f64>,
    sampling: &mut NoiseStream,
) -> Result<PathRecord> {
    grid.check_pieces(coeffs)?;
    let d = model.dim();
    if x0.len() != d || sampling.normals_per_interval() != d {
        return Err(Error::dim("initial point or sampling stream does not match model dimension"));
    }
    let pair = transition(&settings.prior, grid.delta())?;
    let step = StateTransition::per_coordinate(&pair, d, 0);
    let r = settings.measurement_noise(d, grid.delta());

    let mut x = x0.clone();
    let mut values = Vec::with_capacity(grid.steps() + 1);
    let mut innovations = Vec::with_capacity(grid.steps());
    values.push(x.clone());
    for k in 0..grid.steps() {
        let (t0, t1) = (grid.time(k), grid.time(k + 1));
        let field = ParabolaField::new(model, coeffs.piece(k));
        let start = GaussianState::dirac(interleave(&x, &field.eval(&x, t0), 0));
        let predicted = predict(&start, &step)?;
        let mm = ode_measurement(model, field, settings.scheme)?.with_noise(r.clone());
        let (post, inn) = update(&predicted, &mm, t1)?;
        let (mean, cov) = solution_block(&post.mean, &post.cov, d);
        x = draw(&mean, &cov, sampling, k);
        values.push(x.clone());
        innovations.push(inn);
    }
    Ok(PathRecord { times: grid.times(), values, covariances: None, innovations })
}

/// Registry wrapper for [`alg2_run`].
#[derive(Clone, Copy, Debug)]
pub struct GaussianSampler {
    settings: FilterSettings,
}

impl GaussianSampler {
    pub fn new(settings: FilterSettings) -> Self {
        Self { settings }
    }
}

impl Sampler for GaussianSampler {
    fn name(&self) -> &'static str {
        "alg2"
    }

    fn run(&self, input: PathInput<'_>) -> Result<PathRecord> {
        alg2_run(input.model, input.grid, &self.settings, input.coeffs, input.x0, input.sampling)
    }
}
