//! DDIM inversion, pivot search and ZigZag editing over analytic latent
//! diffusion models.

pub mod error;
pub mod harness;
pub mod metrics;
pub mod pivot;
pub mod predictor;
pub mod report;
pub mod rng;
pub mod schedule;
pub mod stepper;
pub mod zigzag;

pub use error::{Error, Result};
