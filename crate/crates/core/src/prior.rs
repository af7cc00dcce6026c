//! Integrated Brownian motion / integrated Ornstein-Uhlenbeck priors with one
//! modelled derivative, `dY = F Y dt + L dW` with `F = [[0, 1], [0, -theta]]`
//! and `L = (0, eta)^T`.

use nalgebra::{DMatrix, Matrix2};

use crate::error::{Error, Result};

/// Gauss-Markov solution prior; `theta = 0` is IBM.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussMarkovPrior {
    theta: f64,
    eta: f64,
    q: usize,
}

impl GaussMarkovPrior {
    pub fn new(theta: f64, eta: f64) -> Result<Self> {
        if !(theta >= 0.0 && theta.is_finite()) {
            return Err(Error::invalid(format!("prior theta must be >= 0, got {theta}")));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::invalid(format!("prior eta must be > 0, got {eta}")));
        }
        Ok(Self { theta, eta, q: 1 })
    }

    pub fn ibm(eta: f64) -> Result<Self> {
        Self::new(0.0, eta)
    }

    pub fn ioup(theta: f64, eta: f64) -> Result<Self> {
        Self::new(theta, eta)
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Number of modelled derivatives (always 1).
    pub fn derivatives(&self) -> usize {
        self.q
    }

    pub fn is_ibm(&self) -> bool {
        self.theta == 0.0
    }

    /// Same prior with `eta` replaced.
    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        Self::new(self.theta, eta)
    }
}

/// Exact one-coordinate transition `Y(t + h) | Y(t) ~ N(A Y(t), Q)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionPair {
    pub a: Matrix2<f64>,
    pub q: Matrix2<f64>,
}

impl TransitionPair {
    /// Block-diagonal `I_d (x) A` and `I_d (x) Q`, padded with `extra` identity
    /// (noise-free) trailing states.
    pub fn block_diagonal(&self, d: usize, extra: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = 2 * d + extra;
        let mut a = DMatrix::zeros(n, n);
        let mut q = DMatrix::zeros(n, n);
        for c in 0..d {
            a.fixed_view_mut::<2, 2>(2 * c, 2 * c).copy_from(&self.a);
            q.fixed_view_mut::<2, 2>(2 * c, 2 * c).copy_from(&self.q);
        }
        for e in 2 * d..n {
            a[(e, e)] = 1.0;
        }
        (a, q)
    }
}

// Below this value of theta * h the power series are used.
const SERIES_SWITCH: f64 = 0.5;
const SERIES_TERMS: usize = 30;

/// Closed-form `A(h) = e^{F h}` and `Q(h) = int_0^h e^{F s} L L^T e^{F^T s} ds`.
pub fn transition(prior: &GaussMarkovPrior, h: f64) -> Result<TransitionPair> {
    if !(h >= 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("transition step must be >= 0, got {h}")));
    }
    let eta2 = prior.eta * prior.eta;
    let theta = prior.theta;
    if theta == 0.0 {
        return Ok(TransitionPair {
            a: Matrix2::new(1.0, h, 0.0, 1.0),
            q: eta2 * Matrix2::new(h * h * h / 3.0, h * h / 2.0, h * h / 2.0, h),
        });
    }
    let x = theta * h;
    let decay = (-x).exp();
    // Q = eta^2 [[h^3 g11, h^2 g12], [h^2 g12, h g22]], A_01 = h g01
    let (g01, g11, g12, g22) = if x < SERIES_SWITCH {
        series_factors(x)
    } else {
        let e1 = -(-x).exp_m1();
        let e2 = -(-2.0 * x).exp_m1();
        (
            e1 / x,
            (x - 2.0 * e1 + 0.5 * e2) / (x * x * x),
            (e1 - 0.5 * e2) / (x * x),
            e2 / (2.0 * x),
        )
    };
    Ok(TransitionPair {
        a: Matrix2::new(1.0, h * g01, 0.0, decay),
        q: eta2 * Matrix2::new(h * h * h * g11, h * h * g12, h * h * g12, h * g22),
    })
}

/// Power series of the factors in `x = theta h`:
///
/// - `g01 = sum_{n>=1} (-1)^(n-1) x^(n-1) / n!`
/// - `g22 = sum_{n>=1} (-1)^(n-1) 2^(n-1) x^(n-1) / n!`
/// - `g12 = sum_{n>=2} (-1)^n (2^(n-1) - 1) x^(n-2) / n!`
/// - `g11 = sum_{n>=3} (-1)^n (2 - 2^(n-1)) x^(n-3) / n!`
fn series_factors(x: f64) -> (f64, f64, f64, f64) {
    let (mut g01, mut g11, mut g12, mut g22) = (0.0, 0.0, 0.0, 0.0);
    let mut inv_fact = 1.0;
    let mut pow2 = 1.0;
    let mut sign = -1.0;
    for n in 1..=SERIES_TERMS as i32 {
        if n > 1 {
            inv_fact /= n as f64;
            pow2 *= 2.0;
            sign = -sign;
        }
        g01 += -sign * x.powi(n - 1) * inv_fact;
        g22 += -sign * pow2 * x.powi(n - 1) * inv_fact;
        if n >= 2 {
            g12 += sign * (pow2 - 1.0) * x.powi(n - 2) * inv_fact;
        }
        if n >= 3 {
            g11 += sign * (2.0 - pow2) * x.powi(n - 3) * inv_fact;
        }
    }
    (g01, g11, g12, g22)
}

/// Multiplies `Q` by `eta2`; `A` is unchanged.
pub fn scale_diffusion(pair: &TransitionPair, eta2: f64) -> Result<TransitionPair> {
    if !(eta2 > 0.0 && eta2.is_finite()) {
        return Err(Error::invalid(format!("diffusion scale must be > 0, got {eta2}")));
    }
    Ok(TransitionPair { a: pair.a, q: pair.q * eta2 })
}
