//! Counter-keyed random streams.
//!
//! Every draw is addressed by `(seed, domain, a, b)`, so the value used for a
//! given sample and timestep never depends on how much randomness was consumed
//! elsewhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Real, Tensor};

/// Separates independent uses of one user seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    SamplerNoise = 1,
    TrainBatch = 2,
    Init = 3,
    Toy = 4,
    Extractor = 5,
    Augment = 6,
    Seg = 7,
}

pub fn keyed_rng(seed: u64, domain: Domain, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

pub fn standard_normal<S: Real>(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| S::of(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

/// Gaussian noise for one generated sample at one reverse step.
#[derive(Clone, Copy, Debug)]
pub struct NoiseStream {
    pub seed: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Noise for `sample` at `step`; step 0 is reserved for the initial x_T.
    pub fn draw<S: Real>(&self, sample: u64, step: u64, item_shape: [usize; 3]) -> Tensor<S> {
        let [c, h, w] = item_shape;
        let mut rng = keyed_rng(self.seed, Domain::SamplerNoise, sample, step);
        standard_normal(&mut rng, [1, c, h, w])
    }
}
