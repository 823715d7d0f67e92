use rand_chacha::ChaCha8Rng;

use super::{Param, Parameterized};
use crate::tensor::{Real, Tensor};

/// Stride-1, zero-padded ("same") square convolution with odd kernel size.
#[derive(Clone, Debug)]
pub struct Conv2d<S> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub weight: Param<S>,
    pub bias: Param<S>,
}

impl<S: Real> Conv2d<S> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = in_ch * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            in_ch,
            out_ch,
            kernel,
            weight: Param::uniform(out_ch * fan_in, bound, rng),
            bias: Param::uniform(out_ch, bound, rng),
        }
    }

    pub fn zeroed(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            weight: Param::zeros(out_ch * in_ch * kernel * kernel),
            bias: Param::zeros(out_ch),
        }
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_ch, "conv input channels");
        let plane = h * w;
        let rows = self.col_rows();
        let mut out = Tensor::zeros([n, self.out_ch, h, w]);
        let mut col = Vec::new();
        for i in 0..n {
            let src: &[S] = if self.kernel == 1 {
                x.item(i)
            } else {
                im2col(x.item(i), c, h, w, self.kernel, &mut col);
                &col
            };
            let dst = out.item_mut(i);
            for (o, row) in dst.chunks_mut(plane).enumerate() {
                row.fill(self.bias.value[o]);
            }
            S::gemm(
                self.out_ch,
                rows,
                plane,
                S::one(),
                &self.weight.value,
                (rows as isize, 1),
                src,
                (plane as isize, 1),
                S::one(),
                dst,
                (plane as isize, 1),
            );
        }
        out
    }

    /// Accumulates weight/bias gradients and returns dL/dx.
    pub fn backward(&mut self, x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let rows = self.col_rows();
        let mut dx = Tensor::zeros(x.shape());
        let mut col = Vec::new();
        let mut dcol = vec![S::zero(); rows * plane];
        for i in 0..n {
            let g = dy.item(i);
            for (o, row) in g.chunks(plane).enumerate() {
                self.bias.grad[o] += row.iter().copied().sum::<S>();
            }
            let src: &[S] = if self.kernel == 1 {
                x.item(i)
            } else {
                im2col(x.item(i), c, h, w, self.kernel, &mut col);
                &col
            };
            // dW += dy * col^T
            S::gemm(
                self.out_ch,
                plane,
                rows,
                S::one(),
                g,
                (plane as isize, 1),
                src,
                (1, plane as isize),
                S::one(),
                &mut self.weight.grad,
                (rows as isize, 1),
            );
            // dcol = W^T * dy
            let target: &mut [S] = if self.kernel == 1 {
                dx.item_mut(i)
            } else {
                &mut dcol
            };
            S::gemm(
                rows,
                self.out_ch,
                plane,
                S::one(),
                &self.weight.value,
                (1, rows as isize),
                g,
                (plane as isize, 1),
                S::zero(),
                target,
                (plane as isize, 1),
            );
            if self.kernel != 1 {
                col2im(&dcol, c, h, w, self.kernel, dx.item_mut(i));
            }
        }
        dx
    }
}

impl<S: Real> Parameterized<S> for Conv2d<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Unfolds `[c, h, w]` into `[c*k*k, h*w]` with zero padding `k/2`.
fn im2col<S: Real>(x: &[S], c: usize, h: usize, w: usize, k: usize, col: &mut Vec<S>) {
    let plane = h * w;
    let pad = (k / 2) as isize;
    col.clear();
    col.resize(c * k * k * plane, S::zero());
    for ci in 0..c {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = ((ci * k + ky) * k + kx) * plane;
                let dst = &mut col[row..row + plane];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = sy as usize * w;
                    let d = &mut dst[y * w + x_lo..y * w + x_hi];
                    let sx0 = (x_lo as isize + dx) as usize;
                    d.copy_from_slice(&src[s0 + sx0..s0 + sx0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[c*k*k, h*w]` back onto `[c, h, w]`.
fn col2im<S: Real>(col: &[S], c: usize, h: usize, w: usize, k: usize, dx: &mut [S]) {
    let plane = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..c {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let ddx = kx as isize - pad;
                let row = ((ci * k + ky) * k + kx) * plane;
                let src = &col[row..row + plane];
                let x_lo = (-ddx).max(0) as usize;
                let x_hi = (w as isize - ddx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = sy as usize * w;
                    let sx0 = (x_lo as isize + ddx) as usize;
                    for (j, &g) in src[y * w + x_lo..y * w + x_hi].iter().enumerate() {
                        dst[s0 + sx0 + j] += g;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn naive_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [n, c, h, w] = x.shape();
        let k = conv.kernel as isize;
        let p = k / 2;
        let mut out = Tensor::zeros([n, conv.out_ch, h, w]);
        for i in 0..n {
            for o in 0..conv.out_ch {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = conv.bias.value[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y + ky - p;
                                    let sx = xx + kx - p;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let widx = ((o * c + ci) * conv.kernel + ky as usize)
                                        * conv.kernel
                                        + kx as usize;
                                    acc += conv.weight.value[widx]
                                        * x.at(i, ci, sy as usize, sx as usize);
                                }
                            }
                        }
                        *out.at_mut(i, o, y as usize, xx as usize) = acc;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        use rand::Rng;
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 3] {
            let conv = Conv2d::<f64>::new(3, 4, k, &mut rng);
            let x = random_tensor([2, 3, 5, 6], &mut rng);
            let got = conv.forward(&x);
            assert!(got.max_abs_diff(&naive_conv(&conv, &x)) < 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <dy, J dx> == <J^T dy, dx> for the input Jacobian, and the weight
        // gradient equals the finite difference of <dy, y>.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, &mut rng);
        let x = random_tensor([1, 2, 4, 5], &mut rng);
        let dy = random_tensor([1, 3, 4, 5], &mut rng);
        let dx = conv.backward(&x, &dy);
        let objective = |c: &Conv2d<f64>, x: &Tensor<f64>| -> f64 {
            c.forward(x).data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for idx in [0, 7, 19, 39] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-7, "dx[{idx}]");
        }
        for idx in [0, 11, 53] {
            let mut cp = conv.clone();
            cp.weight.value[idx] += h;
            let mut cm = conv.clone();
            cm.weight.value[idx] -= h;
            let fd = (objective(&cp, &x) - objective(&cm, &x)) / (2.0 * h);
            assert!((fd - conv.weight.grad[idx]).abs() < 1e-7, "dW[{idx}]");
        }
        let db: f64 = dy.item(0)[..20].iter().sum();
        assert!((conv.bias.grad[0] - db).abs() < 1e-12);
    }
}
