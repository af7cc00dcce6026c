use nalgebra::DVector;
use rayon::prelude::*;

use super::em::EmStepper;
use super::{GridSpec, PathRecord};
use crate::brownian::{Coarsener, PiecewiseParabola};
use crate::error::{Error, Result};
use crate::models::{InitialState, SdeModel};
use crate::rng::{NoiseStream, Purpose};
use crate::samplers::covariance_sqrt;

/// One coupled sample: a fine Euler-Maruyama reference and the coarse
/// parabola stream built from the same fine Brownian pieces.
#[derive(Clone, Debug)]
pub struct CoupledPath {
    /// Fine solution kept at the coarse grid times only.
    pub fine: PathRecord,
    pub coarse: PiecewiseParabola,
    pub x0: DVector<f64>,
}

/// Starting point of path `path`: the fixed start, or a draw from the initial law.
pub fn initial_point(model: &SdeModel, seed: u64, path: u64) -> DVector<f64> {
    match model.initial() {
        InitialState::Fixed(x) => x.clone(),
        InitialState::Gaussian { mean, cov } => {
            let mut s = NoiseStream::new(seed, path, 0, Purpose::Initial, mean.len());
            let mut z = DVector::zeros(mean.len());
            s.fill_interval(0, z.as_mut_slice());
            mean + covariance_sqrt(cov) * z
        }
    }
}

/// Integer ratio `coarse / fine`, rejecting anything else.
fn fine_factor(factor: f64) -> Result<usize> {
    let m = factor.round();
    if !(m >= 1.0) || (factor - m).abs() > 1e-9 * m {
        return Err(Error::invalid(format!("fine factor must be a positive integer, got {factor}")));
    }
    Ok(m as usize)
}

/// Simulates path `path` of a coupled experiment.
///
/// Fine pieces of length `delta / factor` are drawn from the coefficient
/// stream of `(seed, path, level)`; their increments drive Euler-Maruyama and
/// every `factor` of them are aggregated into one coarse piece.
pub fn coupled_path(
    model: &SdeModel,
    coarse: &GridSpec,
    factor: f64,
    seed: u64,
    path: u64,
    level: u8,
) -> Result<CoupledPath> {
    let big_m = fine_factor(factor)?;
    let m = model.noise_dim();
    let fine_delta = coarse.delta() / big_m as f64;
    let (sb, si) = (fine_delta.sqrt(), (0.5 * fine_delta).sqrt());
    let mut stream = NoiseStream::new(seed, path, level, Purpose::Coefficients, 2 * m);
    let mut stepper = EmStepper::new(model);

    let x0 = initial_point(model, seed, path);
    let mut x = x0.clone();
    let mut z = vec![0.0; 2 * m];
    let mut b = vec![0.0; m];
    let mut i = vec![0.0; m];
    let mut values = Vec::with_capacity(coarse.steps() + 1);
    let mut pieces = Vec::with_capacity(coarse.steps());
    values.push(x.clone());
    for k in 0..coarse.steps() {
        let t0 = coarse.time(k);
        let mut acc = Coarsener::new(t0, fine_delta, m);
        for j in 0..big_m {
            let fine_k = k * big_m + j;
            stream.fill_interval(fine_k as u64, &mut z);
            for c in 0..m {
                b[c] = z[c] * sb;
                i[c] = z[m + c] * si;
            }
            stepper.step(model, x.as_mut_slice(), t0 + j as f64 * fine_delta, fine_delta, &b);
            acc.push(&b, &i);
        }
        pieces.push(acc.finish()?);
        values.push(x.clone());
    }
    let fine = PathRecord { times: coarse.times(), values, covariances: None, innovations: Vec::new() };
    Ok(CoupledPath { fine, coarse: PiecewiseParabola::new(pieces)?, x0 })
}

/// Runs `f` on each of `n` coupled paths in parallel and returns the results in path order.
///
/// Nothing but the per-path results is kept, so this scales to large `n`.
pub fn map_coupled<T, F>(
    model: &SdeModel,
    coarse: &GridSpec,
    factor: f64,
    n: usize,
    seed: u64,
    level: u8,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, CoupledPath) -> Result<T> + Sync,
{
    (0..n as u64)
        .into_par_iter()
        .map(|p| coupled_path(model, coarse, factor, seed, p, level).and_then(|c| f(p, c)))
        .collect()
}

/// All `n` coupled paths at coarse step `delta` with fine step `delta / factor`.
pub fn coupled_experiment(
    model: &SdeModel,
    delta: f64,
    factor: f64,
    n: usize,
    seed: u64,
    level: u8,
) -> Result<Vec<CoupledPath>> {
    let grid = GridSpec::new(model.horizon(), delta)?;
    map_coupled(model, &grid, factor, n, seed, level, |_, c| Ok(c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::{coarsen, sample_coeffs};
    use crate::models::{fhn_model, FhnParams};
    use crate::samplers::em_run;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    #[test]
    fn unit_factor_reuses_fine_pieces() {
        let fhn = fhn_model(FhnParams::default()).unwrap();
        let grid = GridSpec::new(1.0, 0.0625).unwrap();
        let c = coupled_path(&fhn, &grid, 1.0, 11, 3, 0).unwrap();
        let mut s = NoiseStream::new(11, 3, 0, Purpose::Coefficients, 2);
        let direct = PiecewiseParabola::sample(&mut s, grid.steps(), grid.delta(), 1).unwrap();
        for k in 0..grid.steps() {
            assert_relative_eq!(c.coarse.piece(k).b, direct.piece(k).b, epsilon = 1e-15);
            assert_relative_eq!(c.coarse.piece(k).i, direct.piece(k).i, epsilon = 1e-15);
        }
    }

    #[test]
    fn fine_reference_and_coarse_stream_share_noise() {
        let fhn = fhn_model(FhnParams::default()).unwrap();
        let grid = GridSpec::new(1.0, 0.125).unwrap();
        let big_m = 8;
        let c = coupled_path(&fhn, &grid, big_m as f64, 5, 0, 2).unwrap();
        let fine_grid = grid.refine(big_m).unwrap();
        let mut s = NoiseStream::new(5, 0, 2, Purpose::Coefficients, 2);
        let fine: Vec<_> = (0..fine_grid.steps())
            .map(|k| sample_coeffs(&mut s, k as u64, fine_grid.delta(), 1).unwrap())
            .collect();
        let inc: Vec<_> = fine.iter().map(|p| p.b.clone()).collect();
        let reference = em_run(&fhn, &fine_grid, &c.x0, &inc).unwrap();
        for k in 0..=grid.steps() {
            assert_relative_eq!(c.fine.values[k], reference.values[k * big_m], epsilon = 1e-12);
        }
        for k in 0..grid.steps() {
            let expected = coarsen(&fine[k * big_m..(k + 1) * big_m]).unwrap();
            assert_relative_eq!(c.coarse.piece(k).b, expected.b, epsilon = 1e-14);
            assert_relative_eq!(c.coarse.piece(k).i, expected.i, epsilon = 1e-14);
        }
    }

    #[test]
    fn rejects_fractional_factor_and_is_reproducible() {
        let fhn = fhn_model(FhnParams::default()).unwrap();
        assert!(coupled_experiment(&fhn, 0.0625, 2.5, 2, 1, 0).is_err());
        assert!(coupled_experiment(&fhn, 0.0625, 0.0, 2, 1, 0).is_err());
        let a = coupled_experiment(&fhn, 0.0625, 16.0, 3, 1, 0).unwrap();
        let b = coupled_experiment(&fhn, 0.0625, 16.0, 3, 1, 0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.fine, y.fine);
            assert_eq!(x.coarse, y.coarse);
        }
    }

    #[test]
    fn gaussian_initial_law_is_sampled_per_path() {
        let fhn = fhn_model(FhnParams::default())
            .unwrap()
            .with_initial(InitialState::Gaussian { mean: DVector::zeros(2), cov: DMatrix::identity(2, 2) })
            .unwrap();
        let a = initial_point(&fhn, 1, 0);
        assert_eq!(a, initial_point(&fhn, 1, 0));
        assert_ne!(a, initial_point(&fhn, 1, 1));
    }
}
