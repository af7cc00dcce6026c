//! Error estimators, log-log order regression, quasi-MLE calibration and Z-scores.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::filter::Innovation;
use crate::samplers::PathRecord;

/// Error estimates at one step size. Strong errors are absent for samplers
/// whose paths are not coupled to the reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErrorEstimates {
    pub delta: f64,
    pub eps_local: Option<f64>,
    pub eps_global: Option<f64>,
    pub eps_weak: f64,
    pub n: usize,
}

/// Least-squares fit of `ln eps = a ln delta + ln b + c nu`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogLogFit {
    pub a_hat: f64,
    pub ln_b_hat: f64,
    /// Residual standard deviation with divisor `n - 2`.
    pub c_hat: f64,
    pub r2: f64,
    pub points: usize,
}

/// Per-delta estimates together with one fit per error kind.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub estimates: Vec<ErrorEstimates>,
    pub local: Option<LogLogFit>,
    pub global: Option<LogLogFit>,
    pub weak: LogLogFit,
}

impl ConvergenceReport {
    /// Fits every error kind present in all estimates.
    pub fn from_estimates(estimates: Vec<ErrorEstimates>) -> Result<Self> {
        let fit_opt = |f: fn(&ErrorEstimates) -> Option<f64>| -> Result<Option<LogLogFit>> {
            let pts: Option<Vec<_>> = estimates.iter().map(|e| f(e).map(|v| (e.delta, v))).collect();
            pts.map(|p| fit_loglog(&p)).transpose()
        };
        let local = fit_opt(|e| e.eps_local)?;
        let global = fit_opt(|e| e.eps_global)?;
        let weak_pts: Vec<_> = estimates.iter().map(|e| (e.delta, e.eps_weak)).collect();
        let weak = fit_loglog(&weak_pts)?;
        Ok(Self { estimates, local, global, weak })
    }
}

/// `(1/N) sum ||a_k - b_k||` with the Euclidean norm.
pub fn mean_distance(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<f64> {
    check_ensembles(a, b)?;
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum();
    Ok(sum / a.len() as f64)
}

fn check_ensembles(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<()> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::dim(format!("ensembles of size {} and {}", a.len(), b.len())));
    }
    if a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::dim("ensemble members have different dimensions"));
    }
    Ok(())
}

/// Strong local (first step) and global (terminal) errors of coupled ensembles.
pub fn strong_errors(approx: &[PathRecord], fine: &[PathRecord]) -> Result<(f64, f64)> {
    if approx.len() != fine.len() {
        return Err(Error::dim(format!("{} approximate paths for {} reference paths", approx.len(), fine.len())));
    }
    for (p, (a, f)) in approx.iter().zip(fine).enumerate() {
        let same = a.times.len() == f.times.len()
            && a.times.iter().zip(&f.times).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        if !same || a.len() < 2 {
            return Err(Error::dim(format!("path {p}: approximate and reference grids differ")));
        }
    }
    let pick = |r: &[PathRecord], k: Option<usize>| -> Vec<DVector<f64>> {
        r.iter().map(|p| p.values[k.unwrap_or(p.len() - 1)].clone()).collect()
    };
    let local = mean_distance(&pick(approx, Some(1)), &pick(fine, Some(1)))?;
    let global = mean_distance(&pick(approx, None), &pick(fine, None))?;
    Ok((local, global))
}

/// `(1/N) || sum_k (x_k x_k^T - y_k y_k^T) ||_F` over terminal points.
pub fn weak_error(approx: &[DVector<f64>], fine: &[DVector<f64>]) -> Result<f64> {
    check_ensembles(approx, fine)?;
    let d = approx[0].len();
    let mut sum = DMatrix::zeros(d, d);
    for (x, y) in approx.iter().zip(fine) {
        sum += x * x.transpose() - y * y.transpose();
    }
    Ok(sum.norm() / approx.len() as f64)
}

/// Ordinary least squares of `ln eps` on `ln delta`.
pub fn fit_loglog(points: &[(f64, f64)]) -> Result<LogLogFit> {
    let n = points.len();
    if n < 3 {
        return Err(Error::Regression(format!("need at least 3 step sizes, got {n}")));
    }
    if let Some((d, e)) = points.iter().find(|(d, e)| !(*d > 0.0) || !(*e > 0.0)) {
        return Err(Error::Regression(format!("log of non-positive value at delta = {d}, eps = {e}")));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Regression("step sizes must not all be equal".into()));
    }
    let a_hat = sxy / sxx;
    let ln_b_hat = my - a_hat * mx;
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - ln_b_hat - a_hat * x).powi(2)).sum();
    let r2 = if syy > 0.0 { (1.0 - ss_res / syy).clamp(0.0, 1.0) } else { 1.0 };
    let c_hat = (ss_res / (nf - 2.0)).sqrt();
    Ok(LogLogFit { a_hat, ln_b_hat, c_hat, r2, points: n })
}

/// Quasi maximum-likelihood prior scale `(1/K) sum z_k^T S_k^{-1} z_k`.
///
/// The innovations must come from a run with unit prior scale.
pub fn mle_eta2(innovations: &[Innovation]) -> Result<f64> {
    if innovations.is_empty() {
        return Err(Error::invalid("no innovations to calibrate from"));
    }
    let mut sum = 0.0;
    for (k, inn) in innovations.iter().enumerate() {
        let chol = inn.s.clone().cholesky().ok_or(Error::SingularCovariance { index: k })?;
        sum += inn.z.dot(&chol.solve(&inn.z));
    }
    Ok(sum / innovations.len() as f64)
}

/// Marginal Z-scores of a reference path under an alg3 record, for `k = 1..=K`.
pub fn z_scores(fine: &PathRecord, mixture: &PathRecord) -> Result<Vec<DVector<f64>>> {
    let covs = mixture
        .covariances
        .as_ref()
        .ok_or_else(|| Error::invalid("z-scores need a record with Gaussian marginals"))?;
    if fine.len() != mixture.len() {
        return Err(Error::dim(format!("reference has {} points, mixture has {}", fine.len(), mixture.len())));
    }
    (1..mixture.len())
        .map(|k| {
            let (x, m, p) = (&fine.values[k], &mixture.values[k], &covs[k]);
            if x.len() != m.len() {
                return Err(Error::dim("reference and mixture dimensions differ"));
            }
            let mut z = DVector::zeros(m.len());
            for i in 0..m.len() {
                let var = p[(i, i)];
                if !(var > 0.0) {
                    return Err(Error::ZeroVariance { step: k, component: i });
                }
                z[i] = (x[i] - m[i]) / var.sqrt();
            }
            Ok(z)
        })
        .collect()
}
