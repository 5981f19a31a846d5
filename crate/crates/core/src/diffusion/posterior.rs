use anomaly_tensor::{Real, Tensor};

use super::denoiser::DenoiserOutput;
use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};

/// Reverse-step mean `(x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)`
/// and variance `exp(v log beta_t + (1 - v) log beta_tilde_t)`.
pub fn posterior_mean_variance<T: Real>(
    sched: &DiffusionSchedule,
    x_t: &Tensor<T>,
    t: usize,
    out: &DenoiserOutput<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    sched.check_t(t)?;
    if out.eps_hat.shape() != x_t.shape() || out.v.shape() != x_t.shape() {
        return Err(Error::Data(format!(
            "denoiser output {:?}/{:?} for input {:?}",
            out.eps_hat.shape(),
            out.v.shape(),
            x_t.shape()
        )));
    }
    let beta = sched.beta(t);
    let coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let mu = x_t.zip_map(&out.eps_hat, |x, e| {
        T::from_f64_lossy((x.as_f64() - coef * e.as_f64()) * inv_sqrt_alpha)
    })?;
    let sigma = interpolate_variance(beta, sched.beta_tilde(t), &out.v);
    Ok((mu, sigma))
}

/// `beta^v * beta_tilde^(1 - v)`: the same value as the log-space
/// interpolation, written so both endpoints are reproduced exactly.
pub fn interpolate_variance<T: Real>(beta: f64, beta_tilde: f64, v: &Tensor<T>) -> Tensor<T> {
    v.map(|v| {
        let v = v.as_f64();
        T::from_f64_lossy(beta.powf(v) * beta_tilde.powf(1.0 - v))
    })
}

/// KL divergence between diagonal Gaussians given as (mean, log-variance).
pub fn gaussian_kl(mean1: f64, logvar1: f64, mean2: f64, logvar2: f64) -> f64 {
    0.5 * ((logvar2 - logvar1)
        + (logvar1 - logvar2).exp_m1()
        + (mean1 - mean2).powi(2) * (-logvar2).exp())
}
