//! DDPM noise schedule, forward noising, ancestral reverse step and the
//! epsilon-prediction loss.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Parameters from which a [`NoiseSchedule`] is rebuilt; recorded in metadata.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub kind: ScheduleKind,
}

impl ScheduleParams {
    /// Linear 1e-4..0.02 endpoints defined for 1000 steps, rescaled by
    /// `1000 / steps` so shorter chains keep a comparable final alpha_bar.
    /// Both endpoints are capped at 0.999 for very short chains.
    pub fn ddpm_scaled(steps: usize) -> Self {
        let scale = 1000.0 / steps.max(1) as f64;
        Self {
            steps,
            beta_start: (1e-4 * scale).min(0.999),
            beta_end: (0.02 * scale).min(0.999),
            kind: ScheduleKind::Linear,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}

/// Per-step noise levels, indexed by timestep `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(config_err("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(config_err(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_start
                    } else {
                        beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect(),
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            params: ScheduleParams {
                steps,
                beta_start,
                beta_end,
                kind,
            },
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Range {
                value: t as i64,
                context: format!("timestep must be in 1..={}", self.steps()),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Fixed posterior variance `beta_t (1 - abar_{t-1}) / (1 - abar_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn q_sample<S: Real>(&self, x0: &Tensor<S>, t: usize, eps: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_t(t)?;
        x0.same_shape(eps)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (S::of(ab.sqrt()), S::of((1.0 - ab).sqrt()));
        let mut out = x0.clone();
        for (o, &e) in out.data_mut().iter_mut().zip(eps.data()) {
            *o = a * *o + b * e;
        }
        Ok(out)
    }

    /// Inverts [`q_sample`](Self::q_sample) given the exact noise.
    pub fn predict_x0<S: Real>(&self, x_t: &Tensor<S>, t: usize, eps: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_t(t)?;
        x_t.same_shape(eps)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = x_t.clone();
        for (o, &e) in out.data_mut().iter_mut().zip(eps.data()) {
            *o = S::of((o.as_f64() - b * e.as_f64()) / a);
        }
        Ok(out)
    }

    /// One ancestral DDPM step from `x_t` to `x_{t-1}`.
    ///
    /// `noise` is scaled by the posterior standard deviation; at `t == 1` that
    /// is zero and any supplied noise must be all zeros.
    pub fn reverse_step<S: Real>(
        &self,
        eps_hat: &Tensor<S>,
        x_t: &Tensor<S>,
        t: usize,
        noise: Option<&Tensor<S>>,
    ) -> Result<Tensor<S>> {
        self.check_t(t)?;
        x_t.same_shape(eps_hat)?;
        if let Some(z) = noise {
            x_t.same_shape(z)?;
            if t == 1 && z.data().iter().any(|v| *v != S::zero()) {
                return Err(config_err("noise must be zero at the final step t = 1"));
            }
        }
        let beta = self.beta(t);
        let coef = S::of(beta / (1.0 - self.alpha_bar(t)).sqrt());
        let inv_sqrt_alpha = S::of(1.0 / self.alpha(t).sqrt());
        let sigma = S::of(self.posterior_variance(t).sqrt());
        let mut out = x_t.clone();
        for (o, &e) in out.data_mut().iter_mut().zip(eps_hat.data()) {
            *o = (*o - coef * e) * inv_sqrt_alpha;
        }
        if let (Some(z), true) = (noise, t > 1) {
            for (o, &n) in out.data_mut().iter_mut().zip(z.data()) {
                *o += sigma * n;
            }
        }
        Ok(out)
    }
}

/// Mean squared error over all elements.
pub fn training_loss<S: Real>(eps_hat: &Tensor<S>, eps: &Tensor<S>) -> Result<f64> {
    if eps_hat.shape() != eps.shape() {
        return Err(shape_err(format!(
            "prediction {:?} vs target {:?}",
            eps_hat.shape(),
            eps.shape()
        )));
    }
    let n = eps.len().max(1) as f64;
    Ok(eps_hat
        .data()
        .iter()
        .zip(eps.data())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>()
        / n)
}

/// Gradient of [`training_loss`] with respect to `eps_hat`.
pub fn training_loss_grad<S: Real>(eps_hat: &Tensor<S>, eps: &Tensor<S>) -> Tensor<S> {
    let scale = S::of(2.0 / eps.len().max(1) as f64);
    let mut g = eps_hat.clone();
    for (o, &e) in g.data_mut().iter_mut().zip(eps.data()) {
        *o = (*o - e) * scale;
    }
    g
}
