//! Additive-noise SDE models `dX = mu(X, t) dt + sigma(t) dB`.
//!
//! Drift, Jacobian and diffusion are plain callables writing into caller-owned
//! buffers so the fine Euler-Maruyama reference never allocates per step.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type DriftFn = dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync;
pub type JacobianFn = dyn Fn(&[f64], f64, &mut DMatrix<f64>) + Send + Sync;
pub type DiffusionFn = dyn Fn(f64, &mut DMatrix<f64>) + Send + Sync;

/// Law of `X_0`.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialState {
    Fixed(DVector<f64>),
    Gaussian { mean: DVector<f64>, cov: DMatrix<f64> },
}

impl InitialState {
    pub fn mean(&self) -> &DVector<f64> {
        match self {
            InitialState::Fixed(x) => x,
            InitialState::Gaussian { mean, .. } => mean,
        }
    }

    /// Covariance of `X_0`; zero for a fixed start.
    pub fn cov(&self) -> DMatrix<f64> {
        match self {
            InitialState::Fixed(x) => DMatrix::zeros(x.len(), x.len()),
            InitialState::Gaussian { cov, .. } => cov.clone(),
        }
    }
}

/// An additive-noise SDE on `[0, horizon]`. Immutable and cheap to clone.
#[derive(Clone)]
pub struct SdeModel {
    name: String,
    dim: usize,
    noise_dim: usize,
    horizon: f64,
    drift: Arc<DriftFn>,
    jacobian: Option<Arc<JacobianFn>>,
    diffusion: Arc<DiffusionFn>,
    initial: InitialState,
}

impl fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("horizon", &self.horizon)
            .field("has_jacobian", &self.jacobian.is_some())
            .field("initial", &self.initial)
            .finish()
    }
}

impl SdeModel {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        noise_dim: usize,
        horizon: f64,
        drift: Arc<DriftFn>,
        diffusion: Arc<DiffusionFn>,
        initial: InitialState,
    ) -> Result<Self> {
        if dim == 0 || noise_dim == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        match &initial {
            InitialState::Fixed(x) if x.len() != dim => {
                return Err(Error::dim(format!("initial state has length {}, expected {dim}", x.len())))
            }
            InitialState::Gaussian { mean, cov }
                if mean.len() != dim || cov.nrows() != dim || cov.ncols() != dim =>
            {
                return Err(Error::dim("initial Gaussian does not match model dimension"))
            }
            _ => {}
        }
        Ok(Self {
            name: name.into(),
            dim,
            noise_dim,
            horizon,
            drift,
            jacobian: None,
            diffusion,
            initial,
        })
    }

    pub fn with_jacobian(mut self, jacobian: Arc<JacobianFn>) -> Self {
        self.jacobian = Some(jacobian);
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn with_initial(mut self, initial: InitialState) -> Result<Self> {
        if initial.mean().len() != self.dim {
            return Err(Error::dim("initial state does not match model dimension"));
        }
        self.initial = initial;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn initial(&self) -> &InitialState {
        &self.initial
    }

    pub fn has_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    pub fn drift_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (self.drift)(x, t, out)
    }

    pub fn drift(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        (self.drift)(x.as_slice(), t, out.as_mut_slice());
        out
    }

    pub fn jacobian_into(&self, x: &[f64], t: f64, out: &mut DMatrix<f64>) -> Result<()> {
        let jac = self
            .jacobian
            .as_ref()
            .ok_or_else(|| Error::MissingJacobian(self.name.clone()))?;
        jac(x, t, out);
        Ok(())
    }

    pub fn jacobian(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        self.jacobian_into(x.as_slice(), t, &mut out)?;
        Ok(out)
    }

    pub fn diffusion_into(&self, t: f64, out: &mut DMatrix<f64>) {
        (self.diffusion)(t, out)
    }

    pub fn diffusion(&self, t: f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.noise_dim);
        (self.diffusion)(t, &mut out);
        out
    }
}

/// Parameters of the stochastic FitzHugh-Nagumo oscillator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FhnParams {
    pub eps: f64,
    pub s: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub sigma: f64,
}

impl Default for FhnParams {
    fn default() -> Self {
        Self { eps: 0.1, s: 0.0, gamma: 1.5, alpha: 0.8, sigma: 0.3 }
    }
}

/// Stochastic FitzHugh-Nagumo model on `[0, 1]` started at the origin.
///
/// Noise enters only the recovery variable, so the diffusion's first row is zero.
pub fn fhn_model(params: FhnParams) -> Result<SdeModel> {
    let FhnParams { eps, s, gamma, alpha, sigma } = params;
    if [eps, s, gamma, alpha, sigma].iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("FitzHugh-Nagumo parameters must be finite"));
    }
    if eps == 0.0 {
        return Err(Error::invalid("FitzHugh-Nagumo eps must be non-zero"));
    }
    let inv_eps = 1.0 / eps;
    let drift: Arc<DriftFn> = Arc::new(move |x, _t, out| {
        out[0] = inv_eps * (s + x[0] - x[0] * x[0] * x[0] - x[1]);
        out[1] = alpha + gamma * x[0] - x[1];
    });
    let jacobian: Arc<JacobianFn> = Arc::new(move |x, _t, out| {
        out[(0, 0)] = (1.0 - 3.0 * x[0] * x[0]) * inv_eps;
        out[(0, 1)] = -inv_eps;
        out[(1, 0)] = gamma;
        out[(1, 1)] = -1.0;
    });
    let diffusion: Arc<DiffusionFn> = Arc::new(move |_t, out| {
        out[(0, 0)] = 0.0;
        out[(1, 0)] = sigma;
    });
    Ok(SdeModel::new(
        "fhn",
        2,
        1,
        1.0,
        drift,
        diffusion,
        InitialState::Fixed(DVector::zeros(2)),
    )?
    .with_jacobian(jacobian))
}

pub type VectorMap = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;
pub type MatrixMap = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

/// Affine drift `g(t) + f(t) x` with time-dependent additive noise.
#[derive(Clone)]
pub struct AffineParams {
    pub g: VectorMap,
    pub f: MatrixMap,
    pub sigma: MatrixMap,
}

impl AffineParams {
    /// Time-homogeneous parameters.
    pub fn constant(g: DVector<f64>, f: DMatrix<f64>, sigma: DMatrix<f64>) -> Self {
        Self {
            g: Arc::new(move |_| g.clone()),
            f: Arc::new(move |_| f.clone()),
            sigma: Arc::new(move |_| sigma.clone()),
        }
    }
}

/// Builds the affine model `dX = (g(t) + f(t) X) dt + sigma(t) dB`.
pub fn affine_model(params: AffineParams, initial: InitialState, horizon: f64) -> Result<SdeModel> {
    let g0 = (params.g)(0.0);
    let f0 = (params.f)(0.0);
    let s0 = (params.sigma)(0.0);
    let dim = g0.len();
    if f0.nrows() != dim || f0.ncols() != dim || s0.nrows() != dim {
        return Err(Error::dim("affine parameter shapes are inconsistent"));
    }
    for t in [0.0, 0.5 * horizon, horizon] {
        let finite = (params.g)(t).iter().chain((params.f)(t).iter()).chain((params.sigma)(t).iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid(format!("affine parameters are not finite at t = {t}")));
        }
    }
    let noise_dim = s0.ncols();
    let AffineParams { g, f, sigma } = params;
    let f_jac = f.clone();
    let drift: Arc<DriftFn> = Arc::new(move |x, t, out| {
        let gt = g(t);
        let ft = f(t);
        for i in 0..out.len() {
            let mut acc = gt[i];
            for j in 0..x.len() {
                acc += ft[(i, j)] * x[j];
            }
            out[i] = acc;
        }
    });
    let jacobian: Arc<JacobianFn> = Arc::new(move |_x, t, out| out.copy_from(&f_jac(t)));
    let diffusion: Arc<DiffusionFn> = Arc::new(move |t, out| out.copy_from(&sigma(t)));
    Ok(SdeModel::new("affine", dim, noise_dim, horizon, drift, diffusion, initial)?.with_jacobian(jacobian))
}

/// Scalar time-homogeneous affine SDE `dX = (g - lambda X) dt + sigma dB`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarAffine {
    pub g: f64,
    pub lambda: f64,
    pub sigma: f64,
}

impl ScalarAffine {
    pub fn params(&self) -> AffineParams {
        AffineParams::constant(
            DVector::from_element(1, self.g),
            DMatrix::from_element(1, 1, -self.lambda),
            DMatrix::from_element(1, 1, self.sigma),
        )
    }
}

const SERIES_THRESHOLD: f64 = 1e-6;

/// Exact Gaussian transition `(mean, variance)` of a scalar affine SDE over `h`.
pub fn exact_affine_transition(params: ScalarAffine, x0: f64, h: f64) -> Result<(f64, f64)> {
    if !(h >= 0.0) {
        return Err(Error::invalid(format!("transition duration must be >= 0, got {h}")));
    }
    let ScalarAffine { g, lambda, sigma } = params;
    let x = lambda * h;
    // (1 - e^{-x}) / x and (1 - e^{-2x}) / (2x)
    let (phi, psi) = if x.abs() < SERIES_THRESHOLD {
        (
            1.0 - x / 2.0 + x * x / 6.0 - x * x * x / 24.0,
            1.0 - x + 2.0 * x * x / 3.0 - x * x * x / 3.0,
        )
    } else {
        (-(-x).exp_m1() / x, -(-2.0 * x).exp_m1() / (2.0 * x))
    };
    let mean = x0 * (-x).exp() + g * h * phi;
    let var = sigma * sigma * h * psi;
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn default_fhn() -> SdeModel {
        fhn_model(FhnParams::default()).unwrap()
    }

    #[test]
    fn fhn_drift_at_origin() {
        let m = default_fhn();
        let d = m.drift(&DVector::from_vec(vec![0.0, 0.0]), 0.0);
        assert_relative_eq!(d[0], 0.0);
        assert_relative_eq!(d[1], 0.8);
    }

    #[test]
    fn fhn_drift_off_origin() {
        let m = default_fhn();
        let d = m.drift(&DVector::from_vec(vec![1.0, 0.0]), 0.0);
        assert_relative_eq!(d[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(d[1], 2.3, epsilon = 1e-15);
    }

    #[test]
    fn fhn_jacobian_at_origin() {
        let j = default_fhn().jacobian(&DVector::zeros(2), 0.0).unwrap();
        assert_relative_eq!(j, DMatrix::from_row_slice(2, 2, &[10.0, -10.0, 1.5, -1.0]), epsilon = 1e-12);
    }

    #[test]
    fn fhn_rejects_zero_eps() {
        assert!(fhn_model(FhnParams { eps: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn fhn_diffusion_is_hypoelliptic_and_constant() {
        let m = default_fhn();
        for t in [0.0, 0.3, 1.0] {
            let s = m.diffusion(t);
            assert_eq!(s[(0, 0)], 0.0);
            assert_eq!(s[(1, 0)], 0.3);
        }
    }

    #[test]
    fn affine_drift_and_jacobian() {
        let p = ScalarAffine { g: 0.0, lambda: 1.0, sigma: 1.0 };
        let m = affine_model(p.params(), InitialState::Fixed(DVector::zeros(1)), 1.0).unwrap();
        assert_eq!(m.drift(&DVector::from_element(1, 2.0), 0.3)[0], -2.0);
        assert_eq!(m.jacobian(&DVector::zeros(1), 0.0).unwrap()[(0, 0)], -1.0);

        let bm = ScalarAffine { g: 0.0, lambda: 0.0, sigma: 1.0 };
        let m = affine_model(bm.params(), InitialState::Fixed(DVector::zeros(1)), 1.0).unwrap();
        assert_eq!(m.drift(&DVector::from_element(1, 5.0), 0.0)[0], 0.0);
        assert_eq!(m.diffusion(0.7)[(0, 0)], 1.0);
    }

    #[test]
    fn exact_transition_examples() {
        let ou = ScalarAffine { g: 0.0, lambda: 1.0, sigma: 1.0 };
        assert_eq!(exact_affine_transition(ou, 0.7, 0.0).unwrap(), (0.7, 0.0));

        let bm = ScalarAffine { g: 0.0, lambda: 0.0, sigma: 1.0 };
        let (m, v) = exact_affine_transition(bm, 0.4, 0.3).unwrap();
        assert_relative_eq!(m, 0.4);
        assert_relative_eq!(v, 0.3, epsilon = 1e-15);

        let ou2 = ScalarAffine { g: 0.0, lambda: 1.0, sigma: 2f64.sqrt() };
        let (m, v) = exact_affine_transition(ou2, 1.0, 2f64.ln()).unwrap();
        assert_relative_eq!(m, 0.5, epsilon = 1e-15);
        assert_relative_eq!(v, 0.75, epsilon = 1e-15);

        assert!(exact_affine_transition(ou, 0.0, -1.0).is_err());
    }

    #[test]
    fn exact_transition_series_branch_is_continuous() {
        let near = ScalarAffine { g: 0.3, lambda: 1e-3, sigma: 1.2 };
        let tiny = ScalarAffine { g: 0.3, lambda: 0.99e-6, sigma: 1.2 };
        let (m_tiny, v_tiny) = exact_affine_transition(tiny, 1.0, 1.0).unwrap();
        let (m_ref, v_ref) = exact_affine_transition(near, 1.0, 1e-3).unwrap();
        // the series branch at x = 0.99e-6 vs the Brownian limit
        assert_relative_eq!(m_tiny, 1.0 * (-0.99e-6f64).exp() + 0.3 * (1.0 - 0.99e-6 / 2.0), max_relative = 1e-12);
        assert_relative_eq!(v_tiny, 1.44 * (1.0 - 0.99e-6), max_relative = 1e-12);
        assert!(v_ref > 0.0 && m_ref.is_finite());
    }
}
