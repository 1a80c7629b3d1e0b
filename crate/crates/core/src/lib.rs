//! Demographic-parity post-processing of regression models.
//!
//! A base regressor and a group classifier are turned into a randomized
//! predictor over a finite grid whose output distribution is approximately
//! the same for every sensitive group. The policy is obtained by solving a
//! smoothed, strongly convex dual problem with accelerated stochastic
//! first-order methods.

pub mod base_models;
pub mod dual;
pub mod error;
pub mod eval;
pub mod io;
pub mod math;
pub mod optim;
pub mod pipeline;

pub use error::{Error, Result};
