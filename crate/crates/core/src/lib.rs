//! Attribute-weighted Focal-MSE training for prompt-conditioned density-map
//! counting, together with a synthetic multi-category blob benchmark.
//!
//! Modules, bottom up: [`tensor`] (arithmetic and gradients), [`attributes`]
//! (entropy, offset, certainty, Dirichlet fusion), [`losses`], [`synthgen`]
//! (scenes), [`model`] (the toy counter), [`metrics`], [`trainer`].

pub mod attributes;
pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod synthgen;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use tensor::Tensor;
