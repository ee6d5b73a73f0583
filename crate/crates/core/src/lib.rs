//! Warm-start flow matching for conditional generation.
//!
//! A small deterministic model predicts a per-dimension Gaussian prior from
//! the context; the generator learns a flow-matching velocity field in the
//! space where that prior is standard normal.

pub mod error;
pub mod field;
pub mod flowmatch;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod solvers;
pub mod tasks;
pub mod warmstart;

pub use error::{Error, Result};
pub use field::Field;
