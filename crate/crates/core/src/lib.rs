//! Proportional-error nonlinear regression `y = f(x, θ)(1 + σε)`.
//!
//! The crate fits the model by maximum likelihood (ML), quasi likelihood (QL),
//! weighted least squares (WLS) and data-weighted least squares (DWLS),
//! evaluates their small-σ biases and covariances in closed form, and checks
//! those formulae with seeded Monte Carlo studies, including the two-curve
//! equivalent-dose design used in luminescence dating.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod equivalent_dose;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod model;
pub mod simulation;
mod solver;

pub use error::{Error, Result};
