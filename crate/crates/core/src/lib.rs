//! Ensemble Kalman inversion for linear Gaussian problems.

pub mod bayes;
pub mod covariance;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod mean;
pub mod ode;
pub mod presets;
pub mod problem;
pub mod spectral;

pub use error::{EkiError, Result};
