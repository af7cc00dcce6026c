use nalgebra::{DMatrix, DVector};

use super::{GridSpec, PathInput, PathRecord, Sampler};
use crate::error::{Error, Result};
use crate::models::SdeModel;

/// One Euler-Maruyama step `x <- x + mu(x, t) h + sigma(t) db`, in place.
pub(crate) struct EmStepper {
    mu: Vec<f64>,
    sigma: DMatrix<f64>,
}

impl EmStepper {
    pub(crate) fn new(model: &SdeModel) -> Self {
        Self { mu: vec![0.0; model.dim()], sigma: DMatrix::zeros(model.dim(), model.noise_dim()) }
    }

    #[inline]
    pub(crate) fn step(&mut self, model: &SdeModel, x: &mut [f64], t: f64, h: f64, db: &[f64]) {
        model.drift_into(x, t, &mut self.mu);
        model.diffusion_into(t, &mut self.sigma);
        for (i, xi) in x.iter_mut().enumerate() {
            let mut noise = 0.0;
            for (j, b) in db.iter().enumerate() {
                noise += self.sigma[(i, j)] * b;
            }
            *xi += self.mu[i] * h + noise;
        }
    }
}

/// Euler-Maruyama on `grid` driven by the Brownian increments of each step.
pub fn em_run(model: &SdeModel, grid: &GridSpec, x0: &DVector<f64>, increments: &[DVector<f64>]) -> Result<PathRecord> {
    if increments.len() != grid.steps() {
        return Err(Error::dim(format!("{} increments for {} steps", increments.len(), grid.steps())));
    }
    if x0.len() != model.dim() {
        return Err(Error::dim("initial point does not match model dimension"));
    }
    let mut stepper = EmStepper::new(model);
    let mut x = x0.clone();
    let mut values = Vec::with_capacity(grid.steps() + 1);
    values.push(x.clone());
    for (k, db) in increments.iter().enumerate() {
        if db.len() != model.noise_dim() {
            return Err(Error::dim(format!("increment {k} has length {}", db.len())));
        }
        stepper.step(model, x.as_mut_slice(), grid.time(k), grid.delta(), db.as_slice());
        values.push(x.clone());
    }
    Ok(PathRecord { times: grid.times(), values, covariances: None, innovations: Vec::new() })
}

/// Euler-Maruyama baseline using the increments of the parabola pieces.
#[derive(Clone, Copy, Debug, Default)]
pub struct EmSampler;

impl Sampler for EmSampler {
    fn name(&self) -> &'static str {
        "em"
    }

    fn run(&self, input: PathInput<'_>) -> Result<PathRecord> {
        input.grid.check_pieces(input.coeffs)?;
        let increments: Vec<_> = input.coeffs.pieces().iter().map(|c| c.b.clone()).collect();
        em_run(input.model, input.grid, input.x0, &increments)
    }
}
