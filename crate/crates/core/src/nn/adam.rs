use serde::{Deserialize, Serialize};

use super::Parameterized;
use crate::tensor::Real;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    #[serde(skip)]
    m: Vec<f64>,
    #[serde(skip)]
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients. Does not clear them.
    pub fn step<S: Real, M: Parameterized<S> + ?Sized>(&mut self, model: &mut M) {
        let n = model.num_params();
        if self.m.len() != n {
            self.m = vec![0.0; n];
            self.v = vec![0.0; n];
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut offset = 0;
        model.visit_mut(&mut |p| {
            for (j, (w, g)) in p.value.iter_mut().zip(&p.grad).enumerate() {
                let k = offset + j;
                let g = g.as_f64();
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
                let wv = w.as_f64();
                *w = S::of(wv - lr * (update + wd * wv));
            }
            offset += p.value.len();
        });
    }
}
