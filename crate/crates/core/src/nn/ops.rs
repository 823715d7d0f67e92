use crate::tensor::{Real, Tensor};

#[inline]
fn sigmoid<S: Real>(v: S) -> S {
    (S::one() + (-v).exp()).recip()
}

pub fn silu<S: Real>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward<S: Real>(x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let mut out = dy.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        let s = sigmoid(v);
        *g *= s * (S::one() + v * (S::one() - s));
    }
    out
}

/// Non-overlapping `k x k` average pooling (stride `k`).
pub fn avg_pool<S: Real>(x: &Tensor<S>, k: usize) -> Tensor<S> {
    let [n, c, h, w] = x.shape();
    assert!(h % k == 0 && w % k == 0, "pool {k} does not divide {h}x{w}");
    if k == 1 {
        return x.clone();
    }
    let (oh, ow) = (h / k, w / k);
    let scale = S::of(1.0 / (k * k) as f64);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for i in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = S::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += x.at(i, ch, y * k + dy, xx * k + dx);
                        }
                    }
                    *out.at_mut(i, ch, y, xx) = acc * scale;
                }
            }
        }
    }
    out
}

pub fn avg_pool_backward<S: Real>(dy: &Tensor<S>, k: usize) -> Tensor<S> {
    if k == 1 {
        return dy.clone();
    }
    let mut dx = upsample_nearest(dy, k);
    let scale = S::of(1.0 / (k * k) as f64);
    dx.data_mut().iter_mut().for_each(|v| *v *= scale);
    dx
}

/// Nearest-neighbour upsampling by integer factor `k`.
pub fn upsample_nearest<S: Real>(x: &Tensor<S>, k: usize) -> Tensor<S> {
    if k == 1 {
        return x.clone();
    }
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, h * k, w * k]);
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h * k {
                for xx in 0..w * k {
                    *out.at_mut(i, ch, y, xx) = x.at(i, ch, y / k, xx / k);
                }
            }
        }
    }
    out
}

pub fn upsample_backward<S: Real>(dy: &Tensor<S>, k: usize) -> Tensor<S> {
    if k == 1 {
        return dy.clone();
    }
    let [n, c, h, w] = dy.shape();
    let mut dx = Tensor::zeros([n, c, h / k, w / k]);
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    *dx.at_mut(i, ch, y / k, xx / k) += dy.at(i, ch, y, xx);
                }
            }
        }
    }
    dx
}

pub fn concat_channels<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    assert!(n == nb && h == hb && w == wb, "concat shape mismatch");
    let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
    for i in 0..n {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Tensor::from_vec([n, ca + cb, h, w], data).expect("concat length")
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels<S: Real>(d: &Tensor<S>, first: usize) -> (Tensor<S>, Tensor<S>) {
    (d.channel_range(0, first), d.channel_range(first, d.channels()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let x = Tensor::<f64>::from_vec([1, 1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let g = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        // <pool(x), g> == <x, pool^T(g)>
        let lhs: f64 = avg_pool(&x, 2).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(avg_pool_backward(&g, 2).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        // <up(g), x> == <g, up^T(x)>
        let lhs: f64 = upsample_nearest(&g, 2).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.data().iter().zip(upsample_backward(&x, 2).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn silu_derivative_matches_finite_difference() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 4], vec![-3.0, -0.5, 0.2, 2.5]).unwrap();
        let ones = Tensor::from_vec([1, 1, 1, 4], vec![1.0; 4]).unwrap();
        let d = silu_backward(&x, &ones);
        let h = 1e-6;
        for i in 0..4 {
            let f = |v: f64| v / (1.0 + (-v).exp());
            let v = x.data()[i];
            let fd = (f(v + h) - f(v - h)) / (2.0 * h);
            assert!((fd - d.data()[i]).abs() < 1e-8);
        }
    }
}
