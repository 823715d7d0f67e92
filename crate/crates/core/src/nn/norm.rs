use serde::{Deserialize, Serialize};

use super::{Param, Parameterized};
use crate::tensor::{Real, Tensor};

/// Which elements share normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Statistics over the group's channels at each pixel. Keeps the layer
    /// spatially local, so a network's receptive field is exactly its conv/pool
    /// footprint.
    #[default]
    Local,
    /// Classic GroupNorm: statistics over the group's channels and all pixels.
    Global,
}

#[derive(Clone, Debug)]
pub struct GroupNorm<S> {
    pub channels: usize,
    pub groups: usize,
    pub scope: NormScope,
    pub eps: f64,
    pub gamma: Param<S>,
    pub beta: Param<S>,
}

impl<S: Real> GroupNorm<S> {
    pub fn new(channels: usize, groups: usize, scope: NormScope) -> Self {
        assert!(groups >= 1 && channels.is_multiple_of(groups), "groups must divide channels");
        Self {
            channels,
            groups,
            scope,
            eps: 1e-5,
            gamma: Param::new(vec![S::one(); channels]),
            beta: Param::zeros(channels),
        }
    }

    /// Element index sets sharing one set of statistics, for one batch item.
    fn for_each_set(&self, h: usize, w: usize, mut f: impl FnMut(&[usize])) {
        let plane = h * w;
        let per = self.channels / self.groups;
        let mut idx = Vec::new();
        for g in 0..self.groups {
            match self.scope {
                NormScope::Local => {
                    for p in 0..plane {
                        idx.clear();
                        idx.extend((0..per).map(|j| (g * per + j) * plane + p));
                        f(&idx);
                    }
                }
                NormScope::Global => {
                    idx.clear();
                    idx.extend(g * per * plane..(g + 1) * per * plane);
                    f(&idx);
                }
            }
        }
    }

    fn stats(&self, v: &[S], set: &[usize]) -> (S, S) {
        let m = S::of(set.len() as f64);
        let mean = set.iter().map(|&i| v[i]).sum::<S>() / m;
        let var = set
            .iter()
            .map(|&i| {
                let d = v[i] - mean;
                d * d
            })
            .sum::<S>()
            / m;
        (mean, (var + S::of(self.eps)).sqrt().recip())
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.channels, "norm channels");
        let plane = h * w;
        let mut out = Tensor::zeros(x.shape());
        for i in 0..n {
            let src = x.item(i);
            let dst = out.item_mut(i);
            self.for_each_set(h, w, |set| {
                let (mean, rstd) = self.stats(src, set);
                for &j in set {
                    let ch = j / plane;
                    dst[j] = (src[j] - mean) * rstd * self.gamma.value[ch] + self.beta.value[ch];
                }
            });
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
        let [n, _, h, w] = x.shape();
        let plane = h * w;
        let mut dx = Tensor::zeros(x.shape());
        let mut dgamma = vec![S::zero(); self.channels];
        let mut dbeta = vec![S::zero(); self.channels];
        for i in 0..n {
            let src = x.item(i);
            let g = dy.item(i);
            let dst = dx.item_mut(i);
            self.for_each_set(h, w, |set| {
                let (mean, rstd) = self.stats(src, set);
                let m = S::of(set.len() as f64);
                let mut sum_dxhat = S::zero();
                let mut sum_dxhat_xhat = S::zero();
                for &j in set {
                    let ch = j / plane;
                    let xhat = (src[j] - mean) * rstd;
                    dgamma[ch] += g[j] * xhat;
                    dbeta[ch] += g[j];
                    let dxhat = g[j] * self.gamma.value[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                let mean_dxhat = sum_dxhat / m;
                let mean_dxhat_xhat = sum_dxhat_xhat / m;
                for &j in set {
                    let ch = j / plane;
                    let xhat = (src[j] - mean) * rstd;
                    let dxhat = g[j] * self.gamma.value[ch];
                    dst[j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            });
        }
        for ch in 0..self.channels {
            self.gamma.grad[ch] += dgamma[ch];
            self.beta.grad[ch] += dbeta[ch];
        }
        dx
    }
}

impl<S: Real> Parameterized<S> for GroupNorm<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
