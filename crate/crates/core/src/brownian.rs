//! Piecewise parabola approximation of Brownian motion.
//!
//! On `[t_k, t_k + delta]` each component is
//! `beta(t) = B_{t_k} + b u + sqrt(6) u (u - 1) i` with `u = (t - t_k) / delta`,
//! `b ~ N(0, delta)` and `i ~ N(0, delta / 2)` independent. Only `(b, i)` are
//! stored; the offset `B_{t_k}` is the running sum of earlier increments.

use std::io::{Read, Write};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::rng::NoiseStream;

pub const SQRT6: f64 = 2.449_489_742_783_178;

/// Coefficients of one parabola piece.
#[derive(Clone, Debug, PartialEq)]
pub struct ParabolaCoeffs {
    pub t_start: f64,
    pub delta: f64,
    /// Brownian increment over the interval.
    pub b: DVector<f64>,
    /// Space-time area coefficient.
    pub i: DVector<f64>,
}

impl ParabolaCoeffs {
    pub fn new(t_start: f64, delta: f64, b: DVector<f64>, i: DVector<f64>) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::invalid(format!("interval length must be positive, got {delta}")));
        }
        if b.len() != i.len() || b.is_empty() {
            return Err(Error::dim("increment and area coefficient lengths differ"));
        }
        if !b.iter().chain(i.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("parabola coefficients must be finite"));
        }
        Ok(Self { t_start, delta, b, i })
    }

    pub fn noise_dim(&self) -> usize {
        self.b.len()
    }

    pub fn t_end(&self) -> f64 {
        self.t_start + self.delta
    }

    fn local_time(&self, t: f64) -> Result<f64> {
        let tol = 1e-12 * (1.0 + self.t_end().abs());
        if t < self.t_start - tol || t > self.t_end() + tol {
            return Err(Error::invalid(format!(
                "t = {t} outside interval [{}, {}]",
                self.t_start,
                self.t_end()
            )));
        }
        Ok(((t - self.t_start) / self.delta).clamp(0.0, 1.0))
    }

    /// `beta_k(t) - B_{t_k}`.
    pub fn eval_increment(&self, t: f64) -> Result<DVector<f64>> {
        let u = self.local_time(t)?;
        Ok(self.increment_at_u(u))
    }

    fn increment_at_u(&self, u: f64) -> DVector<f64> {
        if u == 1.0 {
            return self.b.clone();
        }
        let quad = SQRT6 * u * (u - 1.0);
        self.b.zip_map(&self.i, |b, i| b * u + quad * i)
    }

    /// `(A_-, A_+)`: the time derivative at the left and right ends.
    pub fn endpoint_derivatives(&self) -> (DVector<f64>, DVector<f64>) {
        let inv = 1.0 / self.delta;
        let minus = self.b.zip_map(&self.i, |b, i| (b - SQRT6 * i) * inv);
        let plus = self.b.zip_map(&self.i, |b, i| (b + SQRT6 * i) * inv);
        (minus, plus)
    }

    /// `d beta_k / dt` at `t`.
    pub fn derivative_at(&self, t: f64) -> Result<DVector<f64>> {
        let u = self.local_time(t)?;
        let mut out = DVector::zeros(self.b.len());
        self.derivative_at_u(u, out.as_mut_slice());
        Ok(out)
    }

    pub(crate) fn derivative_at_u(&self, u: f64, out: &mut [f64]) {
        let inv = 1.0 / self.delta;
        let slope = SQRT6 * inv * (2.0 * u - 1.0);
        for ((o, b), i) in out.iter_mut().zip(self.b.iter()).zip(self.i.iter()) {
            *o = b * inv + slope * i;
        }
    }

    /// `int_{t_k}^{t_k + delta} (beta_k(t) - B_{t_k}) dt`.
    pub fn integral(&self) -> DVector<f64> {
        let d = self.delta;
        self.b.zip_map(&self.i, |b, i| d * (0.5 * b - i / SQRT6))
    }
}

/// Draws one parabola piece for interval `k` of a regular grid of step `delta`.
///
/// The stream must produce `2 m` normals per interval: `b` first, then `i`.
pub fn sample_coeffs(stream: &mut NoiseStream, k: u64, delta: f64, m: usize) -> Result<ParabolaCoeffs> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::invalid(format!("interval length must be positive, got {delta}")));
    }
    if m == 0 || stream.normals_per_interval() != 2 * m {
        return Err(Error::dim(format!(
            "noise stream yields {} normals per interval, need {}",
            stream.normals_per_interval(),
            2 * m
        )));
    }
    let mut z = vec![0.0; 2 * m];
    stream.fill_interval(k, &mut z);
    let (sb, si) = (delta.sqrt(), (0.5 * delta).sqrt());
    let b = DVector::from_iterator(m, z[..m].iter().map(|v| v * sb));
    let i = DVector::from_iterator(m, z[m..].iter().map(|v| v * si));
    Ok(ParabolaCoeffs { t_start: k as f64 * delta, delta, b, i })
}

/// Streaming aggregation of `M` contiguous fine pieces into one coarse piece.
///
/// The coarse increment is the sum of fine increments and the coarse area
/// coefficient is chosen so both paths have the same time integral over the
/// coarse interval.
#[derive(Clone, Debug)]
pub struct Coarsener {
    t_start: f64,
    fine_delta: f64,
    count: usize,
    running: Vec<f64>,
    midpoint_sum: Vec<f64>,
    area_sum: Vec<f64>,
}

impl Coarsener {
    pub fn new(t_start: f64, fine_delta: f64, m: usize) -> Self {
        Self {
            t_start,
            fine_delta,
            count: 0,
            running: vec![0.0; m],
            midpoint_sum: vec![0.0; m],
            area_sum: vec![0.0; m],
        }
    }

    /// Adds the next fine piece given by its increment and area coefficient.
    pub fn push(&mut self, b: &[f64], i: &[f64]) {
        for j in 0..self.running.len() {
            self.midpoint_sum[j] += self.running[j] + 0.5 * b[j];
            self.running[j] += b[j];
            self.area_sum[j] += i[j];
        }
        self.count += 1;
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn finish(&self) -> Result<ParabolaCoeffs> {
        if self.count == 0 {
            return Err(Error::invalid("cannot coarsen an empty sequence"));
        }
        let mf = self.count as f64;
        let m = self.running.len();
        let b = DVector::from_column_slice(&self.running);
        let i = DVector::from_iterator(
            m,
            (0..m).map(|j| {
                SQRT6 * (0.5 * self.running[j] - self.midpoint_sum[j] / mf) + self.area_sum[j] / mf
            }),
        );
        ParabolaCoeffs::new(self.t_start, self.fine_delta * mf, b, i)
    }
}

/// Conditional coarse coefficients of `fine` (contiguous, equal-length pieces).
pub fn coarsen(fine: &[ParabolaCoeffs]) -> Result<ParabolaCoeffs> {
    let first = fine.first().ok_or_else(|| Error::invalid("cannot coarsen an empty sequence"))?;
    if fine.len() == 1 {
        return Ok(first.clone());
    }
    let h = first.delta;
    let m = first.noise_dim();
    let mut acc = Coarsener::new(first.t_start, h, m);
    for (idx, c) in fine.iter().enumerate() {
        let expected = first.t_start + idx as f64 * h;
        if (c.delta - h).abs() > 1e-12 * h || (c.t_start - expected).abs() > 1e-9 * h + 1e-14 * expected.abs() {
            return Err(Error::invalid(format!("fine piece {idx} is not contiguous with a regular grid")));
        }
        if c.noise_dim() != m {
            return Err(Error::dim("fine pieces have different noise dimensions"));
        }
        acc.push(c.b.as_slice(), c.i.as_slice());
    }
    acc.finish()
}

/// Contiguous parabola pieces on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseParabola {
    delta: f64,
    pieces: Vec<ParabolaCoeffs>,
}

impl PiecewiseParabola {
    pub fn new(pieces: Vec<ParabolaCoeffs>) -> Result<Self> {
        let first = pieces.first().ok_or_else(|| Error::invalid("empty parabola sequence"))?;
        let delta = first.delta;
        let m = first.noise_dim();
        for (k, c) in pieces.iter().enumerate() {
            let expected = k as f64 * delta;
            if (c.delta - delta).abs() > 1e-12 * delta {
                return Err(Error::invalid(format!("piece {k} has length {}, grid step is {delta}", c.delta)));
            }
            if (c.t_start - expected).abs() > 1e-9 * delta + 1e-14 * expected.abs() {
                return Err(Error::invalid(format!("piece {k} starts at {}, expected {expected}", c.t_start)));
            }
            if c.noise_dim() != m {
                return Err(Error::dim("pieces have different noise dimensions"));
            }
        }
        Ok(Self { delta, pieces })
    }

    /// Draws `steps` pieces of length `delta` from intervals `0..steps` of `stream`.
    pub fn sample(stream: &mut NoiseStream, steps: usize, delta: f64, m: usize) -> Result<Self> {
        let pieces = (0..steps as u64)
            .map(|k| sample_coeffs(stream, k, delta, m))
            .collect::<Result<Vec<_>>>()?;
        Self::new(pieces)
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.pieces.len() as f64 * self.delta
    }

    pub fn noise_dim(&self) -> usize {
        self.pieces[0].noise_dim()
    }

    pub fn pieces(&self) -> &[ParabolaCoeffs] {
        &self.pieces
    }

    pub fn piece(&self, k: usize) -> &ParabolaCoeffs {
        &self.pieces[k]
    }

    /// Writes one record per piece: little-endian `f64`s `t_start, delta, b[..m], i[..m]`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        for c in &self.pieces {
            w.write_all(&c.t_start.to_le_bytes())?;
            w.write_all(&c.delta.to_le_bytes())?;
            for v in c.b.iter().chain(c.i.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads records written by [`PiecewiseParabola::write_binary`] for noise dimension `m`.
    pub fn read_binary<R: Read>(mut r: R, m: usize) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let record = 8 * (2 + 2 * m);
        if m == 0 || bytes.len() % record != 0 {
            return Err(Error::invalid(format!(
                "coefficient dump of {} bytes is not a whole number of {record}-byte records",
                bytes.len()
            )));
        }
        let floats: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let pieces = floats
            .chunks_exact(2 + 2 * m)
            .map(|r| {
                ParabolaCoeffs::new(
                    r[0],
                    r[1],
                    DVector::from_column_slice(&r[2..2 + m]),
                    DVector::from_column_slice(&r[2 + m..]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pieces)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn piece(t: f64, d: f64, b: f64, i: f64) -> ParabolaCoeffs {
        ParabolaCoeffs::new(t, d, DVector::from_element(1, b), DVector::from_element(1, i)).unwrap()
    }

    /// Simpson's rule is exact on each quadratic piece.
    fn simpson_integral(pieces: &[ParabolaCoeffs]) -> f64 {
        let mut offset = 0.0;
        let mut total = 0.0;
        for c in pieces {
            let a = c.eval_increment(c.t_start).unwrap()[0];
            let mid = c.eval_increment(c.t_start + 0.5 * c.delta).unwrap()[0];
            let e = c.eval_increment(c.t_end()).unwrap()[0];
            total += c.delta * (offset + (a + 4.0 * mid + e) / 6.0);
            offset += e;
        }
        total
    }

    #[test]
    fn increment_examples() {
        let c = piece(0.0, 1.0, 0.7, -0.4);
        assert_eq!(c.eval_increment(1.0).unwrap()[0], 0.7);
        assert_eq!(c.eval_increment(0.0).unwrap()[0], 0.0);
        assert_relative_eq!(c.eval_increment(0.5).unwrap()[0], 0.35 + SQRT6 / 4.0 * 0.4, epsilon = 1e-15);
        assert!(c.eval_increment(1.5).is_err());
    }

    #[test]
    fn endpoint_derivative_examples() {
        let (m, p) = piece(0.0, 1.0, 1.0, 0.0).endpoint_derivatives();
        assert_eq!((m[0], p[0]), (1.0, 1.0));
        let (m, p) = piece(0.0, 2.0, 0.0, 1.0).endpoint_derivatives();
        assert_relative_eq!(m[0], -SQRT6 / 2.0);
        assert_relative_eq!(p[0], SQRT6 / 2.0);
    }

    #[test]
    fn derivative_matches_endpoints_and_midpoint() {
        let c = piece(0.25, 0.5, 0.3, 0.2);
        let (minus, plus) = c.endpoint_derivatives();
        assert_relative_eq!(c.derivative_at(0.25).unwrap()[0], minus[0], epsilon = 1e-14);
        assert_relative_eq!(c.derivative_at(0.75).unwrap()[0], plus[0], epsilon = 1e-14);
        assert_relative_eq!(c.derivative_at(0.5).unwrap()[0], 0.3 / 0.5, epsilon = 1e-14);
        let q = c.derivative_at(0.375).unwrap()[0];
        assert_relative_eq!(q, 0.75 * minus[0] + 0.25 * plus[0], epsilon = 1e-14);
        assert!(c.derivative_at(0.0).is_err());
    }

    #[test]
    fn endpoint_derivative_l2_norm_is_two_over_sqrt_delta() {
        let delta = 0.25;
        let mut s = NoiseStream::new(5, 0, 0, Purpose::Coefficients, 2);
        let n = 100_000;
        let mut acc = 0.0;
        for k in 0..n {
            let (m, _) = sample_coeffs(&mut s, k, delta, 1).unwrap().endpoint_derivatives();
            acc += m[0] * m[0];
        }
        let l2 = (acc / n as f64).sqrt();
        assert_relative_eq!(l2, 2.0 / delta.sqrt(), max_relative = 0.01);
    }

    #[test]
    fn sample_variance_law() {
        let mut s = NoiseStream::new(9, 0, 0, Purpose::Coefficients, 2);
        let n = 100_000u64;
        let (mut vb, mut vi, mut cbi) = (0.0, 0.0, 0.0);
        for k in 0..n {
            let c = sample_coeffs(&mut s, k, 1.0, 1).unwrap();
            vb += c.b[0] * c.b[0];
            vi += c.i[0] * c.i[0];
            cbi += c.b[0] * c.i[0];
        }
        let nf = n as f64;
        assert!((vb / nf - 1.0).abs() < 3.0 * (2.0 / nf).sqrt());
        assert!((vi / nf - 0.5).abs() < 3.0 * (0.5 / nf).sqrt() * 2f64.sqrt());
        assert!((cbi / nf).abs() < 3.0 * (0.5 / nf).sqrt());
    }

    #[test]
    fn sampling_is_replayable_and_rejects_bad_delta() {
        let mut a = NoiseStream::new(3, 2, 0, Purpose::Coefficients, 4);
        let mut b = NoiseStream::new(3, 2, 0, Purpose::Coefficients, 4);
        assert_eq!(sample_coeffs(&mut a, 17, 0.1, 2).unwrap(), sample_coeffs(&mut b, 17, 0.1, 2).unwrap());
        assert!(sample_coeffs(&mut a, 0, 0.0, 2).is_err());
        assert!(sample_coeffs(&mut a, 0, 0.1, 1).is_err());
    }

    #[test]
    fn midpoint_variance_is_seven_sixteenths() {
        let delta = 0.5;
        let mut s = NoiseStream::new(21, 0, 0, Purpose::Coefficients, 2);
        let n = 200_000;
        let mut acc = 0.0;
        for k in 0..n {
            let p = sample_coeffs(&mut s, k, delta, 1).unwrap();
            let v = p.eval_increment(p.t_start + 0.5 * delta).unwrap()[0];
            acc += v * v;
        }
        let var = acc / n as f64;
        let target = 7.0 * delta / 16.0;
        assert!((var - target).abs() < 4.0 * target * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn coarsen_identity_and_two_piece_example() {
        let c = piece(0.0, 0.1, 0.3, -0.2);
        assert_eq!(coarsen(std::slice::from_ref(&c)).unwrap(), c);

        let fine = [piece(0.0, 0.5, 1.0, 0.0), piece(0.5, 0.5, 0.0, 0.0)];
        let coarse = coarsen(&fine).unwrap();
        assert_eq!(coarse.b[0], 1.0);
        assert_relative_eq!(coarse.i[0], -SQRT6 / 4.0, epsilon = 1e-15);
        assert_relative_eq!(coarse.delta, 1.0);
        // quadrature over the fine path agrees with the coarse piece
        assert_relative_eq!(coarse.integral()[0], simpson_integral(&fine), epsilon = 1e-15);
    }

    #[test]
    fn coarsen_rejects_bad_input() {
        assert!(coarsen(&[]).is_err());
        let gap = [piece(0.0, 0.5, 1.0, 0.0), piece(0.75, 0.5, 0.0, 0.0)];
        assert!(coarsen(&gap).is_err());
    }

    #[test]
    fn coarse_coefficients_have_direct_sample_moments() {
        let m_fine = 16;
        let h = 1.0 / 64.0;
        let coarse_delta = h * m_fine as f64;
        let trials = 100_000u64;
        let mut s = NoiseStream::new(77, 0, 0, Purpose::Coefficients, 2);
        let (mut mi, mut vi, mut vb) = (0.0, 0.0, 0.0);
        for t in 0..trials {
            let mut acc = Coarsener::new(0.0, h, 1);
            for j in 0..m_fine as u64 {
                let c = sample_coeffs(&mut s, t * m_fine as u64 + j, h, 1).unwrap();
                acc.push(c.b.as_slice(), c.i.as_slice());
            }
            let c = acc.finish().unwrap();
            mi += c.i[0];
            vi += c.i[0] * c.i[0];
            vb += c.b[0] * c.b[0];
        }
        let n = trials as f64;
        let var_i = vi / n;
        assert!((mi / n).abs() < 3.0 * (0.5 * coarse_delta / n).sqrt());
        assert!((var_i - 0.5 * coarse_delta).abs() < 3.0 * 0.5 * coarse_delta * (2.0 / n).sqrt());
        assert!((vb / n - coarse_delta).abs() < 3.0 * coarse_delta * (2.0 / n).sqrt());
    }

    #[test]
    fn binary_dump_layout() {
        let p = PiecewiseParabola::new(vec![
            ParabolaCoeffs::new(0.0, 0.5, DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![3.0, 4.0])).unwrap(),
            ParabolaCoeffs::new(0.5, 0.5, DVector::from_vec(vec![5.0, 6.0]), DVector::from_vec(vec![7.0, 8.0])).unwrap(),
        ])
        .unwrap();
        let mut buf = Vec::new();
        p.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 2 * 6 * 8);
        assert_eq!(&buf[16..24], &1.0f64.to_le_bytes());
        assert_eq!(&buf[40..48], &4.0f64.to_le_bytes());
        assert_eq!(PiecewiseParabola::read_binary(&buf[..], 2).unwrap(), p);
        assert!(PiecewiseParabola::read_binary(&buf[..40], 2).is_err());
    }

    #[test]
    fn piecewise_rejects_irregular_grid() {
        assert!(PiecewiseParabola::new(vec![piece(0.0, 0.5, 0.0, 0.0), piece(0.5, 0.25, 0.0, 0.0)]).is_err());
        assert!(PiecewiseParabola::new(vec![]).is_err());
    }

    proptest! {
        #[test]
        fn endpoint_consistency(b in -3.0f64..3.0, i in -3.0f64..3.0, d in 1e-4f64..2.0) {
            let c = piece(0.0, d, b, i);
            prop_assert_eq!(c.eval_increment(d).unwrap()[0], b);
            let (m, p) = c.endpoint_derivatives();
            prop_assert!((m[0] + p[0] - 2.0 * b / d).abs() <= 1e-12 * (1.0 + (b / d).abs() + (i / d).abs()));
        }

        #[test]
        fn coarsening_preserves_time_integral(
            raw in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..=64),
            h in 1e-4f64..0.1,
        ) {
            let fine: Vec<_> = raw.iter().enumerate()
                .map(|(k, (b, i))| piece(k as f64 * h, h, b * h.sqrt(), i * h.sqrt()))
                .collect();
            let coarse = coarsen(&fine).unwrap();
            let reference = simpson_integral(&fine);
            let scale = fine.iter().map(|c| c.b[0].abs() + c.i[0].abs()).sum::<f64>() * h * fine.len() as f64;
            prop_assert!((coarse.integral()[0] - reference).abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE));
            let total: f64 = fine.iter().map(|c| c.b[0]).sum();
            prop_assert_eq!(coarse.b[0], total);
        }
    }
}
