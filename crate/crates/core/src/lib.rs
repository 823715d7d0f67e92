//! Two-stage receptive-field-restricted diffusion for paired defect image
//! and mask synthesis, plus the tooling to score and use the samples.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod qc;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod seg;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
