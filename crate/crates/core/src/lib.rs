//! Pairwise friction prediction from proxy-material measurements.

pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod linalg;
pub mod measurement;
pub mod model;
pub mod proxy;
pub mod spectral;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
