use anomaly_tensor::{Bound, Real, Tape, Tensor, Var};

use super::denoiser::DenoiserArch;
use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};

/// Width of one quantization bin of 8-bit data mapped to `[-1, 1]`.
const BIN_WIDTH: f64 = 2.0 / 255.0;

pub struct HybridLoss {
    pub total: Var,
    pub simple: Var,
    pub vlb: Var,
}

/// Per-sample constant broadcast over the sample's elements.
fn per_sample<T: Real>(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor<T> {
    let stride: usize = shape[1..].iter().product();
    Tensor::from_fn(shape, |i| T::from_f64_lossy(f(i / stride)))
}

/// `L_simple + gamma * L_vlb` at per-sample timesteps `t` and noise `eps`.
///
/// `L_vlb` is the sampled term of the variational bound, averaged over
/// elements and samples: the Gaussian KL against the forward posterior for
/// `t >= 2`, and the discretized negative log-likelihood of `x0` for
/// `t = 1`. The predicted mean enters it through a stop-gradient, so only
/// the variance head learns from it.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_loss<T: Real>(
    tape: &mut Tape<T>,
    arch: &DenoiserArch,
    params: &Bound,
    sched: &DiffusionSchedule,
    x0: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    gamma: f64,
) -> Result<HybridLoss> {
    let shape = x0.shape().to_vec();
    if shape.len() < 2 || shape[0] != t.len() || eps.shape() != x0.shape() {
        return Err(Error::Data(format!(
            "hybrid loss: x0 {shape:?}, eps {:?}, {} timesteps",
            eps.shape(),
            t.len()
        )));
    }
    for &ti in t {
        sched.check_t(ti)?;
    }
    let stride: usize = shape[1..].iter().product();
    let mut x_t = Vec::with_capacity(x0.len());
    for (n, &ti) in t.iter().enumerate() {
        let ab = sched.alpha_bar(ti);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let r = n * stride..(n + 1) * stride;
        x_t.extend(
            x0.data()[r.clone()]
                .iter()
                .zip(&eps.data()[r])
                .map(|(&x, &e)| T::from_f64_lossy(a * x.as_f64() + b * e.as_f64())),
        );
    }
    let x_t = Tensor::new(&shape, x_t)?;
    let model_t: Vec<usize> = t.iter().map(|&ti| sched.model_t(ti)).collect();
    let xv = tape.constant(x_t.clone());
    let (eps_hat, v) = arch.forward(tape, params, xv, &model_t)?;

    let target = tape.constant(eps.clone());
    let diff = tape.sub(target, eps_hat)?;
    let sq = tape.square(diff)?;
    let simple = tape.mean(sq)?;

    // Reverse mean with the noise prediction frozen.
    let frozen = tape.stop_gradient(eps_hat)?;
    let scale = per_sample::<T>(&shape, |n| 1.0 / sched.alpha(t[n]).sqrt());
    let xs = tape.constant(x_t.zip_map(&scale, |x, s| x * s)?);
    let c_eps = tape.constant(per_sample(&shape, |n| {
        -sched.beta(t[n]) / ((1.0 - sched.alpha_bar(t[n])).sqrt() * sched.alpha(t[n]).sqrt())
    }));
    let e_term = tape.mul(frozen, c_eps)?;
    let mu = tape.add(xs, e_term)?;

    let log_ratio = tape.constant(per_sample(&shape, |n| {
        (sched.beta(t[n]) / sched.beta_tilde(t[n])).ln()
    }));
    let log_bt = tape.constant(per_sample(&shape, |n| sched.beta_tilde(t[n]).ln()));
    let lv = tape.mul(v, log_ratio)?;
    let lv = tape.add(lv, log_bt)?;
    let neg_lv = tape.neg(lv)?;
    let inv_var = tape.exp(neg_lv)?;

    // KL(q(x_{t-1} | x_t, x0) || p(x_{t-1} | x_t)), elementwise.
    let post_mean = {
        let data = (0..x0.len())
            .map(|i| {
                let (c0, ct) = sched.posterior_coefs(t[i / stride]);
                T::from_f64_lossy(c0 * x0.data()[i].as_f64() + ct * x_t.data()[i].as_f64())
            })
            .collect();
        tape.constant(Tensor::new(&shape, data)?)
    };
    // lv - lv_q, with lv_q = log beta_tilde
    let d = tape.sub(lv, log_bt)?;
    let neg_d = tape.neg(d)?;
    let ratio = tape.exp(neg_d)?;
    let dm = tape.sub(post_mean, mu)?;
    let dm2 = tape.square(dm)?;
    let quad = tape.mul(dm2, inv_var)?;
    let kl = tape.add(d, ratio)?;
    let kl = tape.add(kl, quad)?;
    let kl = tape.add_scalar(kl, T::from_f64_lossy(-1.0))?;
    let kl = tape.mul_scalar(kl, T::from_f64_lossy(0.5))?;

    // -log of the Gaussian density at x0 times the bin width.
    let x0v = tape.constant(x0.clone());
    let r = tape.sub(x0v, mu)?;
    let r2 = tape.square(r)?;
    let nq = tape.mul(r2, inv_var)?;
    let nll = tape.add(nq, lv)?;
    let nll = tape.mul_scalar(nll, T::from_f64_lossy(0.5))?;
    let nll = tape.add_scalar(
        nll,
        T::from_f64_lossy(0.5 * (2.0 * std::f64::consts::PI).ln() - BIN_WIDTH.ln()),
    )?;

    let is_first = tape.constant(per_sample(&shape, |n| (t[n] == 1) as u8 as f64));
    let is_later = tape.constant(per_sample(&shape, |n| (t[n] != 1) as u8 as f64));
    let kl = tape.mul(kl, is_later)?;
    let nll = tape.mul(nll, is_first)?;
    let terms = tape.add(kl, nll)?;
    let vlb = tape.mean(terms)?;

    let weighted = tape.mul_scalar(vlb, T::from_f64_lossy(gamma))?;
    let total = tape.add(simple, weighted)?;
    Ok(HybridLoss { total, simple, vlb })
}
