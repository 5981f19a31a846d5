use anomaly_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use super::denoiser::NoisePredictor;
use super::posterior::posterior_mean_variance;
use super::schedule::{even_steps, validate_steps, DiffusionSchedule};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

/// Variance used for the perturbation added to deterministic steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaChoice {
    Beta,
    BetaTilde,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Anomaly strength; 0 recovers the ordinary sampler.
    pub s: f64,
    pub ddim_sigma_choice: SigmaChoice,
    /// Retained timesteps, strictly descending and ending at 1.
    pub steps: Vec<usize>,
    /// Clip the implied `x0` estimate to `[-1, 1]` before forming the
    /// mean. Keeps early, poorly predicted steps from diverging.
    pub clip_denoised: bool,
}

impl SamplerConfig {
    pub fn ddpm(total: usize, n_steps: usize, s: f64) -> Self {
        Self {
            kind: SamplerKind::Ddpm,
            s,
            ddim_sigma_choice: SigmaChoice::Learned,
            steps: even_steps(total, n_steps),
            clip_denoised: false,
        }
    }

    pub fn validate(&self, total: usize) -> Result<()> {
        if !(self.s >= 0.0 && self.s.is_finite()) {
            return Err(Error::Config(format!(
                "anomaly strength must be >= 0, got {}",
                self.s
            )));
        }
        validate_steps(&self.steps, total)
    }
}

/// `clip((x_t - sqrt(1 - alpha_bar) eps) / sqrt(alpha_bar), -1, 1)`.
fn clipped_x0(
    sched: &DiffusionSchedule,
    i: usize,
    x: &Tensor<f32>,
    eps: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let ab = sched.alpha_bar(i);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x.zip_map(eps, |xv, e| {
        (((xv as f64 - sb * e as f64) / sa).clamp(-1.0, 1.0)) as f32
    })?)
}

/// One reverse transition at index `i` of the (respaced) schedule `sched`.
/// A standard normal draw is consumed for every element regardless of `s`.
pub fn reverse_step(
    model: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
    i: usize,
    x: &Tensor<f32>,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    let out = model.predict(x, sched.model_t(i))?;
    let z: Tensor<f32> = rng.standard_normal(x.shape());
    let s = cfg.s as f32;
    let next = match cfg.kind {
        SamplerKind::Ddpm => {
            let (mut mu, sigma) = posterior_mean_variance(sched, x, i, &out)?;
            if cfg.clip_denoised {
                let (c0, ct) = sched.posterior_coefs(i);
                mu = clipped_x0(sched, i, x, &out.eps_hat)?
                    .zip_map(x, |x0, xt| (c0 * x0 as f64 + ct * xt as f64) as f32)?;
            }
            let inflated = sigma.map(|v| ((1.0 + s) * v).sqrt());
            let noise = inflated.zip_map(&z, |a, b| a * b)?;
            mu.zip_map(&noise, |m, n| m + n)?
        }
        SamplerKind::Ddim => {
            let ab = sched.alpha_bar(i);
            let abp = sched.alpha_bar_prev(i);
            let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
            let (pa, pb) = (abp.sqrt(), (1.0 - abp).sqrt());
            let det = if cfg.clip_denoised {
                let x0 = clipped_x0(sched, i, x, &out.eps_hat)?;
                x0.zip_map(x, |x0, xv| {
                    let (x0, xv) = (x0 as f64, xv as f64);
                    (pa * x0 + pb * (xv - sa * x0) / sb) as f32
                })?
            } else {
                x.zip_map(&out.eps_hat, |xv, e| {
                    let (xv, e) = (xv as f64, e as f64);
                    (pa * (xv - sb * e) / sa + pb * e) as f32
                })?
            };
            let sigma = match cfg.ddim_sigma_choice {
                SigmaChoice::Beta => Tensor::full(x.shape(), sched.beta(i) as f32),
                SigmaChoice::BetaTilde => Tensor::full(x.shape(), sched.beta_tilde(i) as f32),
                SigmaChoice::Learned => posterior_mean_variance(sched, x, i, &out)?.1,
            };
            let noise = sigma.zip_map(&z, |v, z| (s * v).sqrt() * z)?;
            det.zip_map(&noise, |d, n| d + n)?
        }
    };
    next.check_finite("reverse_step")?;
    Ok(next)
}

/// Runs the reverse chain from `x_T ~ N(0, I)` of the given shape.
/// Every step, including the last, draws from the perturbed transition.
pub fn sdas_sample(
    model: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
    shape: &[usize],
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    cfg.validate(sched.len())?;
    let resp = sched.respace(&cfg.steps)?;
    let mut x = rng.standard_normal(shape);
    for i in (1..=resp.len()).rev() {
        x = reverse_step(model, &resp, i, &x, cfg, rng)?;
    }
    Ok(x)
}

/// Model space `[-1, 1]` to image space `[0, 1]`, clamped.
pub fn to_image_space(x: &Tensor<f32>) -> Tensor<f32> {
    x.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

pub fn to_model_space(x: &Tensor<f32>) -> Tensor<f32> {
    x.map(|v| v * 2.0 - 1.0)
}
