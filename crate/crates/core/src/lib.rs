//! Hierarchical data assimilation for geostatistical hyperparameters and
//! grid-block permeability.
//!
//! The pipeline estimates hyperparameters of a Gaussian log-permeability
//! model with sequential Monte Carlo ABC, picks representative posterior
//! hyperparameter sets, and conditions permeability fields on monitoring
//! data with an ensemble smoother (ESMDA) for each of them. Rejection
//! sampling provides the exact reference posterior. All forward runs go
//! through a small implicit finite-volume flow and tracer model.

pub mod diagnostics;
pub mod error;
pub mod forward;
pub mod geomodel;
pub mod inference;
mod numeric;
pub mod rng;
pub mod selection;

pub use error::{Error, Result};
