//! Probabilistic numerical solvers for additive-noise SDEs.
//!
//! Brownian motion is approximated by random piecewise parabolas, which turns
//! the SDE into a random ODE solved by Gaussian (extended Kalman) filtering.

pub mod analysis;
pub mod brownian;
pub mod config;
pub mod error;
pub mod experiment;
pub mod filter;
pub mod models;
pub mod prior;
pub mod rng;
pub mod samplers;

pub use error::{Error, Result};
