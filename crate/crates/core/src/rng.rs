//! Counter-addressed Gaussian noise.
//!
//! Every `(seed, path, level, purpose)` key selects one ChaCha8 stream, and
//! interval `k` of that stream always starts at word `k * stride`. Normals are
//! produced by Box-Muller from a fixed number of words, so the draws for an
//! interval are the same whether the stream is read sequentially or seeked to,
//! and path results never depend on scheduling.

use std::f64::consts::TAU;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a stream is used for; distinct purposes never share randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    /// Parabola coefficients `(b, i)`.
    Coefficients = 0,
    /// Posterior draws inside the sampling filters.
    Sampling = 1,
    /// Draw of a random initial state.
    Initial = 2,
}

const WORDS_PER_PAIR: u64 = 4;

#[derive(Clone, Debug)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    normals: usize,
    stride: u64,
    next_interval: u64,
    pair: [f64; 2],
}

impl NoiseStream {
    /// `normals` is the number of standard normals consumed per interval.
    pub fn new(seed: u64, path: u64, level: u8, purpose: Purpose, normals: usize) -> Self {
        assert!(path < (1 << 56), "path index out of range");
        assert!(level < 64, "level index out of range");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((path << 8) | ((level as u64) << 2) | purpose as u64);
        let stride = normals.div_ceil(2).max(1) as u64 * WORDS_PER_PAIR;
        Self { rng, normals, stride, next_interval: 0, pair: [0.0; 2] }
    }

    pub fn normals_per_interval(&self) -> usize {
        self.normals
    }

    /// Fills `out` (length `normals_per_interval`) with the standard normals of interval `k`.
    pub fn fill_interval(&mut self, k: u64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.normals);
        if k != self.next_interval {
            self.rng.set_word_pos(k as u128 * self.stride as u128);
        }
        for chunk in out.chunks_mut(2) {
            self.next_pair();
            chunk.copy_from_slice(&self.pair[..chunk.len()]);
        }
        if self.normals == 0 {
            // keep the position aligned with the stride
            self.next_pair();
        }
        self.next_interval = k + 1;
    }

    fn next_pair(&mut self) {
        let u1 = unit_open(self.rng.next_u64());
        let u2 = unit_open(self.rng.next_u64());
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (TAU * u2).sin_cos();
        self.pair = [r * c, r * s];
    }
}

/// Maps 53 random bits onto the open interval (0, 1).
fn unit_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}
