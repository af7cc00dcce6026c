//! Extended Kalman prediction and update for Gaussian ODE filtering.
//!
//! States interleave value and derivative per coordinate, `(x_0, x'_0, x_1, x'_1, ...)`.
//! The marginalised layout appends the parabola coefficients of every noise
//! component, `(b_0, i_0, b_1, i_1, ...)`, after the `2 d` solution entries.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::brownian::{ParabolaCoeffs, SQRT6};
use crate::error::{Error, Result};
use crate::models::SdeModel;
use crate::prior::TransitionPair;


/// Linearisation of the ODE residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// `H = H_1`, no drift Jacobian.
    Ekf0,
    /// `H = H_1 - J H_0`.
    Ekf1,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Ekf0 => "ekf0",
            Scheme::Ekf1 => "ekf1",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ekf0" => Ok(Scheme::Ekf0),
            "ekf1" => Ok(Scheme::Ekf1),
            other => Err(Error::Config(format!("unknown scheme `{other}` (expected ekf0 or ekf1)"))),
        }
    }
}

/// Mean and covariance of the filter state.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::dim(format!("covariance is {}x{}, mean has length {n}", cov.nrows(), cov.ncols())));
        }
        Ok(Self { mean, cov })
    }

    /// Point mass at `mean`.
    pub fn dirac(mean: DVector<f64>) -> Self {
        let n = mean.len();
        Self { mean, cov: DMatrix::zeros(n, n) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Full-state transition built from per-coordinate [`TransitionPair`]s.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTransition {
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl StateTransition {
    /// Independent copies of `pair` on `d` coordinates plus `extra` static states.
    pub fn per_coordinate(pair: &TransitionPair, d: usize, extra: usize) -> Self {
        let (a, q) = pair.block_diagonal(d, extra);
        Self { a, q }
    }
}

/// Residual `z_hat` and its predicted covariance `S` from one update.
#[derive(Clone, Debug, PartialEq)]
pub struct Innovation {
    pub z: DVector<f64>,
    pub s: DMatrix<f64>,
}

/// Observation of the ODE residual, linearised around the predicted mean.
pub trait MeasurementModel {
    /// `(H_tilde, z_hat)` at predicted mean `mean` and time `t`.
    fn linearise(&self, mean: &DVector<f64>, t: f64) -> Result<(DMatrix<f64>, DVector<f64>)>;

    /// Measurement noise covariance `R`.
    fn noise(&self) -> &DMatrix<f64>;
}

fn symmetrise(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `m <- A m`, `P <- A P A^T + Q`.
pub fn predict(state: &GaussianState, transition: &StateTransition) -> Result<GaussianState> {
    let n = state.dim();
    if transition.a.shape() != (n, n) || transition.q.shape() != (n, n) {
        return Err(Error::dim(format!(
            "transition is {:?}, state has dimension {n}",
            transition.a.shape()
        )));
    }
    let mean = &transition.a * &state.mean;
    let mut cov = &transition.a * &state.cov * transition.a.transpose() + &transition.q;
    symmetrise(&mut cov);
    Ok(GaussianState { mean, cov })
}

/// Kalman update conditioning on a zero residual, with the Joseph-form covariance.
pub fn update(
    state: &GaussianState,
    mm: &dyn MeasurementModel,
    t: f64,
) -> Result<(GaussianState, Innovation)> {
    let n = state.dim();
    let (h, z) = mm.linearise(&state.mean, t)?;
    let r = mm.noise();
    if h.ncols() != n || h.nrows() != z.len() || r.shape() != (z.len(), z.len()) {
        return Err(Error::dim("measurement model does not match the state"));
    }
    let ph_t = &state.cov * h.transpose();
    let mut s = &h * &ph_t + r;
    symmetrise(&mut s);
    let trace = s.trace();
    let chol = s.clone().cholesky().ok_or(Error::SingularInnovation { t })?;
    let l = chol.l_dirty();
    let min_pivot = (0..s.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(trace > 0.0) || min_pivot <= 1e-14 * trace {
        return Err(Error::SingularInnovation { t });
    }
    // K = P H^T S^{-1}
    let gain = chol.solve(&ph_t.transpose()).transpose();
    let mean = &state.mean - &gain * &z;
    let mut i_kh = -&gain * &h;
    for i in 0..n {
        i_kh[(i, i)] += 1.0;
    }
    let mut cov = &i_kh * &state.cov * i_kh.transpose();
    if r.iter().any(|v| *v != 0.0) {
        cov += &gain * r * gain.transpose();
    }
    symmetrise(&mut cov);
    Ok((GaussianState { mean, cov }, Innovation { z, s }))
}

/// Random vector field `f(x, t) = mu(x, t) + sigma(t) d beta / dt` of one parabola piece.
///
/// Without a piece this is the plain drift.
#[derive(Clone, Copy, Debug)]
pub struct ParabolaField<'a> {
    pub model: &'a SdeModel,
    pub piece: Option<&'a ParabolaCoeffs>,
}

impl<'a> ParabolaField<'a> {
    pub fn new(model: &'a SdeModel, piece: &'a ParabolaCoeffs) -> Self {
        Self { model, piece: Some(piece) }
    }

    pub fn drift_only(model: &'a SdeModel) -> Self {
        Self { model, piece: None }
    }

    /// Evaluates `f(x, t)` into `out`.
    pub fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.model.drift_into(x, t, out);
        if let Some(piece) = self.piece {
            let u = ((t - piece.t_start) / piece.delta).clamp(0.0, 1.0);
            let mut db = vec![0.0; piece.noise_dim()];
            piece.derivative_at_u(u, &mut db);
            let sigma = self.model.diffusion(t);
            for (i, o) in out.iter_mut().enumerate() {
                for (j, v) in db.iter().enumerate() {
                    *o += sigma[(i, j)] * v;
                }
            }
        }
    }

    pub fn eval(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.model.dim());
        self.eval_into(x.as_slice(), t, out.as_mut_slice());
        out
    }
}

fn solution_values(mean: &DVector<f64>, d: usize) -> Vec<f64> {
    (0..d).map(|i| mean[2 * i]).collect()
}

/// Residual `H_1 m - f(H_0 m, t)` with EKF0 or EKF1 observation matrix.
pub struct OdeMeasurement<'a> {
    field: ParabolaField<'a>,
    scheme: Scheme,
    r: DMatrix<f64>,
}

impl<'a> OdeMeasurement<'a> {
    /// Replaces the default `R = 0`.
    pub fn with_noise(mut self, r: DMatrix<f64>) -> Self {
        self.r = r;
        self
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }
}

fn noise_free(d: usize) -> DMatrix<f64> {
    DMatrix::zeros(d, d)
}

pub fn ekf0_measurement<'a>(model: &'a SdeModel, field: ParabolaField<'a>) -> OdeMeasurement<'a> {
    OdeMeasurement { field, scheme: Scheme::Ekf0, r: noise_free(model.dim()) }
}

pub fn ekf1_measurement<'a>(model: &'a SdeModel, field: ParabolaField<'a>) -> Result<OdeMeasurement<'a>> {
    if !model.has_jacobian() {
        return Err(Error::MissingJacobian(model.name().to_string()));
    }
    Ok(OdeMeasurement { field, scheme: Scheme::Ekf1, r: noise_free(model.dim()) })
}

/// EKF0 or EKF1 measurement by scheme.
pub fn ode_measurement<'a>(
    model: &'a SdeModel,
    field: ParabolaField<'a>,
    scheme: Scheme,
) -> Result<OdeMeasurement<'a>> {
    match scheme {
        Scheme::Ekf0 => Ok(ekf0_measurement(model, field)),
        Scheme::Ekf1 => ekf1_measurement(model, field),
    }
}

fn subtract_jacobian(
    model: &SdeModel,
    x: &[f64],
    t: f64,
    h: &mut DMatrix<f64>,
) -> Result<()> {
    let d = model.dim();
    let mut jac = DMatrix::zeros(d, d);
    model.jacobian_into(x, t, &mut jac)?;
    for i in 0..d {
        for j in 0..d {
            h[(i, 2 * j)] -= jac[(i, j)];
        }
    }
    Ok(())
}

impl MeasurementModel for OdeMeasurement<'_> {
    fn linearise(&self, mean: &DVector<f64>, t: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let model = self.field.model;
        let d = model.dim();
        let n = mean.len();
        if n < 2 * d {
            return Err(Error::dim(format!("state of length {n} cannot hold {d} coordinates")));
        }
        let x = solution_values(mean, d);
        let mut f = vec![0.0; d];
        self.field.eval_into(&x, t, &mut f);
        let z = DVector::from_iterator(d, (0..d).map(|i| mean[2 * i + 1] - f[i]));
        let mut h = DMatrix::zeros(d, n);
        for i in 0..d {
            h[(i, 2 * i + 1)] = 1.0;
        }
        if self.scheme == Scheme::Ekf1 {
            subtract_jacobian(model, &x, t, &mut h)?;
        }
        Ok((h, z))
    }

    fn noise(&self) -> &DMatrix<f64> {
        &self.r
    }
}

/// Measurement for the state augmented with the parabola coefficients of interval `k`.
pub struct MarginalisedMeasurement<'a> {
    model: &'a SdeModel,
    scheme: Scheme,
    t_start: f64,
    delta: f64,
    r: DMatrix<f64>,
}

impl MarginalisedMeasurement<'_> {
    pub fn with_noise(mut self, r: DMatrix<f64>) -> Self {
        self.r = r;
        self
    }

    /// State length `2 d + 2 m`.
    pub fn state_dim(&self) -> usize {
        marginalised_dim(self.model)
    }
}

pub fn marginalised_dim(model: &SdeModel) -> usize {
    2 * model.dim() + 2 * model.noise_dim()
}

pub fn marginalised_measurement(
    model: &SdeModel,
    scheme: Scheme,
    k: usize,
    delta: f64,
) -> Result<MarginalisedMeasurement<'_>> {
    if !(delta > 0.0) {
        return Err(Error::invalid(format!("interval length must be positive, got {delta}")));
    }
    if scheme == Scheme::Ekf1 && !model.has_jacobian() {
        return Err(Error::MissingJacobian(model.name().to_string()));
    }
    Ok(MarginalisedMeasurement {
        model,
        scheme,
        t_start: k as f64 * delta,
        delta,
        r: noise_free(model.dim()),
    })
}

impl MeasurementModel for MarginalisedMeasurement<'_> {
    fn linearise(&self, mean: &DVector<f64>, t: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let model = self.model;
        let (d, m) = (model.dim(), model.noise_dim());
        let n = mean.len();
        if n != 2 * d + 2 * m {
            return Err(Error::dim(format!(
                "marginalised state must have length {}, got {n}",
                2 * d + 2 * m
            )));
        }
        let u = (t - self.t_start) / self.delta;
        let inv = 1.0 / self.delta;
        let area_weight = SQRT6 * inv * (2.0 * u - 1.0);
        let x = solution_values(mean, d);
        let mut mu = vec![0.0; d];
        model.drift_into(&x, t, &mut mu);
        let sigma = model.diffusion(t);
        let mut h = DMatrix::zeros(d, n);
        let mut z = DVector::zeros(d);
        for i in 0..d {
            let mut f = mu[i];
            h[(i, 2 * i + 1)] = 1.0;
            for j in 0..m {
                let (cb, ci) = (2 * d + 2 * j, 2 * d + 2 * j + 1);
                f += sigma[(i, j)] * (mean[cb] * inv + area_weight * mean[ci]);
                h[(i, cb)] = -sigma[(i, j)] * inv;
                h[(i, ci)] = -sigma[(i, j)] * area_weight;
            }
            z[i] = mean[2 * i + 1] - f;
        }
        if self.scheme == Scheme::Ekf1 {
            subtract_jacobian(model, &x, t, &mut h)?;
        }
        Ok((h, z))
    }

    fn noise(&self) -> &DMatrix<f64> {
        &self.r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{affine_model, fhn_model, FhnParams, InitialState, ScalarAffine};
    use crate::prior::{transition, GaussMarkovPrior};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn brownian() -> SdeModel {
        let p = ScalarAffine { g: 0.0, lambda: 0.0, sigma: 1.0 };
        affine_model(p.params(), InitialState::Fixed(DVector::zeros(1)), 1.0).unwrap()
    }

    fn piece(t: f64, d: f64, b: f64, i: f64) -> ParabolaCoeffs {
        ParabolaCoeffs::new(t, d, DVector::from_element(1, b), DVector::from_element(1, i)).unwrap()
    }

    fn ibm_step(delta: f64) -> StateTransition {
        StateTransition::per_coordinate(&transition(&GaussMarkovPrior::ibm(1.0).unwrap(), delta).unwrap(), 1, 0)
    }

    #[test]
    fn predict_examples() {
        let tr = ibm_step(0.5);
        let p = predict(&GaussianState::dirac(DVector::from_vec(vec![1.0, 2.0])), &tr).unwrap();
        assert_eq!(p.mean, DVector::from_vec(vec![2.0, 2.0]));
        assert_eq!(p.cov, tr.q);

        let id = StateTransition { a: DMatrix::identity(2, 2), q: DMatrix::zeros(2, 2) };
        let s = GaussianState::new(DVector::from_vec(vec![0.3, -1.0]), DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        assert_eq!(predict(&s, &id).unwrap(), s);
        assert!(predict(&s, &ibm_step(0.1).clone()).is_ok());
        let wrong = StateTransition::per_coordinate(&transition(&GaussMarkovPrior::ibm(1.0).unwrap(), 0.1).unwrap(), 2, 0);
        assert!(predict(&s, &wrong).is_err());
    }

    #[test]
    fn zero_residual_leaves_mean_unchanged() {
        let model = brownian();
        let c = piece(0.0, 0.25, 0.0, 0.0);
        let tr = ibm_step(0.25);
        let prior = predict(&GaussianState::dirac(DVector::from_vec(vec![0.4, 0.0])), &tr).unwrap();
        let mm = ekf0_measurement(&model, ParabolaField::new(&model, &c));
        let (post, inn) = update(&prior, &mm, 0.25).unwrap();
        assert_eq!(inn.z[0], 0.0);
        assert_eq!(post.mean, prior.mean);
    }

    #[test]
    fn ibm_gain_is_exact() {
        let model = brownian();
        for e in 4..=10 {
            let delta = 2f64.powi(-e);
            let c = piece(0.0, delta, 0.1, 0.05);
            let prior = predict(&GaussianState::dirac(DVector::zeros(2)), &ibm_step(delta)).unwrap();
            let mm = ekf0_measurement(&model, ParabolaField::new(&model, &c));
            let (post, inn) = update(&prior, &mm, delta).unwrap();
            // mean shift is -K z, so K = -(m' - m) / z
            let k0 = -(post.mean[0] - prior.mean[0]) / inn.z[0];
            assert_relative_eq!(k0, delta / 2.0, max_relative = 1e-14);
            assert_relative_eq!(post.cov[(0, 0)], delta.powi(3) / 12.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn exact_brownian_increment_recovery() {
        let model = brownian();
        let delta = 0.125;
        let c = piece(0.0, delta, 0.37, -0.21);
        let (minus, _) = c.endpoint_derivatives();
        let start = GaussianState::dirac(DVector::from_vec(vec![1.5, minus[0]]));
        let prior = predict(&start, &ibm_step(delta)).unwrap();
        let mm = ekf0_measurement(&model, ParabolaField::new(&model, &c));
        let (post, _) = update(&prior, &mm, delta).unwrap();
        assert_relative_eq!(post.mean[0], 1.5 + 0.37, epsilon = 1e-14);
    }

    #[test]
    fn singular_innovation_is_reported() {
        let model = brownian();
        let c = piece(0.0, 0.1, 0.0, 0.0);
        let mm = ekf0_measurement(&model, ParabolaField::new(&model, &c));
        let err = update(&GaussianState::dirac(DVector::zeros(2)), &mm, 0.1).unwrap_err();
        assert!(matches!(err, Error::SingularInnovation { t } if t == 0.1));
    }

    #[test]
    fn ekf0_observation_matrix() {
        let model = brownian();
        let mm = ekf0_measurement(&model, ParabolaField::drift_only(&model));
        for mean in [DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![3.0, -2.0])] {
            let (h, z) = mm.linearise(&mean, 0.5).unwrap();
            assert_eq!(h, DMatrix::from_row_slice(1, 2, &[0.0, 1.0]));
            assert_eq!(z[0], mean[1]);
        }
    }

    #[test]
    fn ekf1_observation_matrix() {
        let ou = ScalarAffine { g: 0.0, lambda: 2.5, sigma: 1.0 };
        let model = affine_model(ou.params(), InitialState::Fixed(DVector::zeros(1)), 1.0).unwrap();
        let mm = ekf1_measurement(&model, ParabolaField::drift_only(&model)).unwrap();
        let (h, _) = mm.linearise(&DVector::from_vec(vec![1.0, 0.0]), 0.0).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(1, 2, &[2.5, 1.0]));

        let fhn = fhn_model(FhnParams::default()).unwrap();
        let mm = ekf1_measurement(&fhn, ParabolaField::drift_only(&fhn)).unwrap();
        let (h, _) = mm.linearise(&DVector::zeros(4), 0.0).unwrap();
        let expected = DMatrix::from_row_slice(2, 4, &[-10.0, 1.0, 10.0, 0.0, -1.5, 0.0, 1.0, 1.0]);
        assert_relative_eq!(h, expected, epsilon = 1e-12);
    }

    #[test]
    fn ekf1_needs_jacobian() {
        let m = brownian();
        let drift = std::sync::Arc::new(|_x: &[f64], _t: f64, out: &mut [f64]| out[0] = 0.0);
        let diffusion = std::sync::Arc::new(|_t: f64, out: &mut DMatrix<f64>| out[(0, 0)] = 1.0);
        let bare = SdeModel::new("bare", 1, 1, 1.0, drift, diffusion, InitialState::Fixed(DVector::zeros(1))).unwrap();
        assert!(matches!(ekf1_measurement(&bare, ParabolaField::drift_only(&m)), Err(Error::MissingJacobian(_))));
        assert!(marginalised_measurement(&bare, Scheme::Ekf1, 0, 0.1).is_err());
    }

    #[test]
    fn zero_jacobian_ekf1_equals_ekf0() {
        let model = brownian();
        let c = piece(0.0, 0.25, 0.3, 0.1);
        let f = ParabolaField::new(&model, &c);
        let mean = DVector::from_vec(vec![0.2, 0.7]);
        let a = ekf0_measurement(&model, f).linearise(&mean, 0.25).unwrap();
        let b = ekf1_measurement(&model, f).unwrap().linearise(&mean, 0.25).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn marginalised_coefficient_blocks() {
        let ou = ScalarAffine { g: 0.0, lambda: 0.0, sigma: 0.8 };
        let model = affine_model(ou.params(), InitialState::Fixed(DVector::zeros(1)), 1.0).unwrap();
        let delta = 0.25;
        let mm = marginalised_measurement(&model, Scheme::Ekf0, 2, delta).unwrap();
        let mean = DVector::from_vec(vec![0.0, 0.0, 0.1, 0.2]);
        let (h, _) = mm.linearise(&mean, 3.0 * delta).unwrap();
        assert_relative_eq!(h[(0, 2)], -0.8 / delta, epsilon = 1e-14);
        assert_relative_eq!(h[(0, 3)], -0.8 * SQRT6 / delta, epsilon = 1e-12);
        let (h_mid, _) = mm.linearise(&mean, 2.5 * delta).unwrap();
        assert_eq!(h_mid[(0, 3)].abs(), 0.0);
        assert!(mm.linearise(&DVector::zeros(2), 0.5).is_err());
    }

    #[test]
    fn marginalised_without_noise_reduces_to_standard() {
        let fhn = fhn_model(FhnParams { sigma: 0.0, ..Default::default() }).unwrap();
        let mean = DVector::from_vec(vec![0.3, 0.1, -0.2, 0.4, 0.5, -0.7]);
        for scheme in [Scheme::Ekf0, Scheme::Ekf1] {
            let (hm, zm) = marginalised_measurement(&fhn, scheme, 0, 0.1).unwrap().linearise(&mean, 0.05).unwrap();
            let std = ode_measurement(&fhn, ParabolaField::drift_only(&fhn), scheme).unwrap();
            let (hs, zs) = std.linearise(&mean.rows(0, 4).into_owned(), 0.05).unwrap();
            assert_eq!(zm, zs);
            assert_eq!(hm.columns(0, 4), hs);
            assert!(hm.columns(4, 2).iter().all(|v| *v == 0.0));
        }
    }

    fn random_psd(n: usize, seed: &[f64]) -> DMatrix<f64> {
        let l = DMatrix::from_iterator(n, n, seed.iter().cycle().copied().take(n * n));
        &l * l.transpose()
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 2000, ..ProptestConfig::default() })]
        #[test]
        fn joseph_update_stays_psd(
            entries in prop::collection::vec(-2.0f64..2.0, 16),
            hrow in prop::collection::vec(-3.0f64..3.0, 4),
            z in -5.0f64..5.0,
            r in 0.0f64..0.5,
        ) {
            struct Fixed { h: DMatrix<f64>, z: DVector<f64>, r: DMatrix<f64> }
            impl MeasurementModel for Fixed {
                fn linearise(&self, _m: &DVector<f64>, _t: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
                    Ok((self.h.clone(), self.z.clone()))
                }
                fn noise(&self) -> &DMatrix<f64> { &self.r }
            }
            let p = random_psd(4, &entries) + DMatrix::identity(4, 4) * 1e-3;
            let state = GaussianState::new(DVector::zeros(4), p).unwrap();
            let mm = Fixed {
                h: DMatrix::from_row_slice(1, 4, &hrow),
                z: DVector::from_element(1, z),
                r: DMatrix::from_element(1, 1, r),
            };
            if let Ok((post, _)) = update(&state, &mm, 0.0) {
                let c = &post.cov;
                prop_assert!((c - c.transpose()).abs().max() <= 1e-12 * (1.0 + c.abs().max()));
                let tr = c.trace();
                let min = c.clone().symmetric_eigenvalues().min();
                prop_assert!(min >= -1e-10 * (1.0 + tr));
            }
        }
    }
}
