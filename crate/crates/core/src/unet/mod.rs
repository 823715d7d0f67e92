//! Configurable U-Net denoisers with exact receptive-field accounting.

mod config;
mod model;
mod rf;

pub use config::{
    large_preset, medium_preset, mirror, norm_groups_for, small_preset, Activation, DownBlockSpec, Preset,
    UNetConfig, UpBlockSpec, REFERENCE_BASE,
};
pub use model::{timestep_embedding, Denoiser, ForwardCache, InitOptions, ResBlock};
pub use rf::{receptive_field, Footprint, RfReport, RfTracer, TraceEntry};

use crate::error::Result;
use crate::nn::Parameterized;
use crate::tensor::Tensor;

/// Anything that predicts noise for a batch at integer timesteps.
pub trait NoisePredictor {
    /// `[in_channels, resolution, resolution]`.
    fn item_shape(&self) -> [usize; 3];
    fn predict(&self, x: &Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>>;
}

impl NoisePredictor for Denoiser<f32> {
    fn item_shape(&self) -> [usize; 3] {
        let c = self.config();
        [c.in_channels, c.input_resolution, c.input_resolution]
    }

    fn predict(&self, x: &Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>> {
        self.forward(x, t)
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn item_shape(&self) -> [usize; 3] {
        (**self).item_shape()
    }

    fn predict(&self, x: &Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>> {
        (**self).predict(x, t)
    }
}

/// Summary of a built model.
#[derive(Clone, Debug)]
pub struct ModelInfo {
    pub params: usize,
    pub rf: usize,
    pub arch_hash: String,
}

pub fn model_info<S: crate::tensor::Real>(model: &Denoiser<S>) -> ModelInfo {
    ModelInfo {
        params: model.num_params(),
        rf: receptive_field(model.config()).rf,
        arch_hash: model.config().arch_hash(),
    }
}
