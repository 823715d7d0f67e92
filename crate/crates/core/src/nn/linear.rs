use rand_chacha::ChaCha8Rng;

use super::{Param, Parameterized};
use crate::tensor::{Real, Tensor};

/// Dense layer over `[n, in, 1, 1]` tensors.
#[derive(Clone, Debug)]
pub struct Linear<S> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param<S>,
    pub bias: Param<S>,
}

impl<S: Real> Linear<S> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: Param::uniform(inputs * outputs, bound, rng),
            bias: Param::uniform(outputs, bound, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let n = x.batch();
        assert_eq!(x.item_len(), self.inputs, "linear input width");
        let mut out = Tensor::zeros([n, self.outputs, 1, 1]);
        for i in 0..n {
            let dst = out.item_mut(i);
            dst.copy_from_slice(&self.bias.value);
            S::gemm(
                self.outputs,
                self.inputs,
                1,
                S::one(),
                &self.weight.value,
                (self.inputs as isize, 1),
                x.item(i),
                (1, 1),
                S::one(),
                dst,
                (1, 1),
            );
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
        let n = x.batch();
        let mut dx = Tensor::zeros(x.shape());
        for i in 0..n {
            let xi = x.item(i);
            let g = dy.item(i);
            for (o, &go) in g.iter().enumerate() {
                self.bias.grad[o] += go;
                let row = &mut self.weight.grad[o * self.inputs..(o + 1) * self.inputs];
                for (wg, &xv) in row.iter_mut().zip(xi) {
                    *wg += go * xv;
                }
            }
            let d = dx.item_mut(i);
            for (o, &go) in g.iter().enumerate() {
                let row = &self.weight.value[o * self.inputs..(o + 1) * self.inputs];
                for (dv, &wv) in d.iter_mut().zip(row) {
                    *dv += go * wv;
                }
            }
        }
        dx
    }
}

impl<S: Real> Parameterized<S> for Linear<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
