use anomaly_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

const LINEAR_START: f64 = 1e-4;
const LINEAR_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Forward-process tables, indexed by `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
    /// Timestep passed to the denoiser at each index; the identity unless
    /// the schedule was respaced.
    model_t: Vec<usize>,
}

impl DiffusionSchedule {
    pub fn build(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs T >= 2, got {steps}")));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| LINEAR_START + (LINEAR_END - LINEAR_START) * i as f64 / (steps - 1) as f64)
                .collect(),
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t) / f(t - 1)).min(MAX_BETA))
                    .collect()
            }
        };
        Ok(Self::from_betas(beta, (1..=steps).collect()))
    }

    fn from_betas(beta: Vec<f64>, model_t: Vec<usize>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let beta_tilde = (0..beta.len())
            .map(|i| {
                if i == 0 {
                    beta[0]
                } else {
                    (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * beta[i]
                }
            })
            .collect();
        Self {
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
            model_t,
        }
    }

    /// Sub-schedule over the retained timesteps (strictly descending,
    /// ending at 1). Betas are recomputed so that the retained cumulative
    /// products are unchanged.
    pub fn respace(&self, steps: &[usize]) -> Result<Self> {
        validate_steps(steps, self.len())?;
        let mut betas = Vec::with_capacity(steps.len());
        let mut prev = 1.0;
        for &t in steps.iter().rev() {
            let ab = self.alpha_bar[t - 1];
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        let model_t = steps.iter().rev().map(|&t| self.model_t[t - 1]).collect();
        Ok(Self::from_betas(betas, model_t))
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn check_t(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.len() {
            return Err(Error::Config(format!(
                "timestep {t} outside 1..={}",
                self.len()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// `alpha_bar(t - 1)` with `alpha_bar(0) = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    pub fn model_t(&self, t: usize) -> usize {
        self.model_t[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta_tildes(&self) -> &[f64] {
        &self.beta_tilde
    }

    /// Coefficients `(c0, ct)` of the posterior mean
    /// `c0 * x0 + ct * x_t` of `q(x_{t-1} | x_t, x0)`.
    pub fn posterior_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let abp = self.alpha_bar_prev(t);
        (
            abp.sqrt() * self.beta(t) / (1.0 - ab),
            self.alpha(t).sqrt() * (1.0 - abp) / (1.0 - ab),
        )
    }

    /// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn q_sample<T: Real>(
        &self,
        x0: &Tensor<T>,
        t: usize,
        eps: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        let a = T::from_f64_lossy(ab.sqrt());
        let b = T::from_f64_lossy((1.0 - ab).sqrt());
        Ok(x0.zip_map(eps, |x, e| a * x + b * e)?)
    }
}

/// `n` timesteps evenly spread over `1..=total`, descending, always
/// containing both endpoints.
pub fn even_steps(total: usize, n: usize) -> Vec<usize> {
    let n = n.clamp(1, total);
    if n == 1 {
        return vec![1];
    }
    let mut out: Vec<usize> = (0..n)
        .map(|i| 1 + ((total - 1) as f64 * i as f64 / (n - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out.reverse();
    out
}

pub fn validate_steps(steps: &[usize], total: usize) -> Result<()> {
    if steps.is_empty() {
        return Err(Error::Config("empty step list".into()));
    }
    if steps.last() != Some(&1) {
        return Err(Error::Config(format!("step list must end at 1: {steps:?}")));
    }
    if steps.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Config(format!(
            "step list must strictly descend: {steps:?}"
        )));
    }
    if steps[0] > total {
        return Err(Error::Config(format!(
            "step {} exceeds T = {total}",
            steps[0]
        )));
    }
    Ok(())
}
