//! Minimal CPU layers with hand-written backward passes.
//!
//! Every layer exposes a pure `forward(&self, ..)` for inference and a
//! `backward(&mut self, input, grad_out)` that accumulates parameter
//! gradients and returns the input gradient. Callers keep whatever
//! activations the backward pass needs.

mod adam;
mod conv;
mod linear;
mod norm;
mod ops;

pub use adam::AdamW;
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{GroupNorm, NormScope};
pub use ops::{
    avg_pool, avg_pool_backward, concat_channels, silu, silu_backward, split_channels,
    upsample_nearest, upsample_backward,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tensor::Real;

/// A trainable array with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<S> {
    pub value: Vec<S>,
    pub grad: Vec<S>,
}

impl<S: Real> Param<S> {
    pub fn new(value: Vec<S>) -> Self {
        let grad = vec![S::zero(); value.len()];
        Self { value, grad }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![S::zero(); len])
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(len: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        Self::new(
            (0..len)
                .map(|_| S::of(rng.random_range(-bound..=bound)))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns parameters, visited in a fixed order.
pub trait Parameterized<S: Real> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g = S::zero()));
    }

    /// Flattened parameter values in visiting order.
    fn flat_values(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |p| out.extend_from_slice(&p.value));
        out
    }

    fn flat_grads(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |p| out.extend_from_slice(&p.grad));
        out
    }

    /// Overwrites all parameters from a flat vector; lengths must match.
    fn load_flat(&mut self, values: &[S]) -> bool {
        if values.len() != self.num_params() {
            return false;
        }
        let mut offset = 0;
        self.visit_mut(&mut |p| {
            let n = p.len();
            p.value.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        });
        true
    }

    /// SHA-256 over the little-endian parameter bytes.
    fn weights_hash(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        self.visit(&mut |p| {
            buf.clear();
            for &v in &p.value {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        });
        hex::encode(hasher.finalize())
    }
}
