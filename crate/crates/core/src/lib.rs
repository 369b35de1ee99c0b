//! Simulation and inference for Brown–Resnick r-Pareto processes: spatial
//! extreme episodes defined by exceedances of a risk functional.

pub mod cli;
pub mod csvio;
pub mod diagnostics;
pub mod error;
pub mod gaussfield;
pub mod geometry;
pub mod inference;
pub mod linalg;
pub mod margins;
pub mod optimize;
pub mod rng;
pub mod rpareto;
pub mod stats;
pub mod synthetic;
pub mod variogram;

pub use error::{Error, Result};
