use anomaly_recon::diffusion::{
    hybrid_loss, train_diffusion, DenoiserArch, DiffusionSchedule, DiffusionTrainConfig,
    ScheduleKind,
};
use anomaly_tensor::{Rng, Tape, Tensor};

#[test]
fn closed_form_forward_matches_iterated_steps() {
    // x_t = sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps, against chaining
    // x_k = sqrt(alpha_k) x_{k-1} + sqrt(beta_k) z_k: equal in distribution
    let sched = DiffusionSchedule::build(50, ScheduleKind::Linear).unwrap();
    let t = 30;
    let n = 40_000;
    let x0 = Tensor::full(&[n], 0.6f64);
    let mut rng = Rng::new(11);
    let eps: Tensor<f64> = rng.standard_normal(&[n]);
    let closed = sched.q_sample(&x0, t, &eps).unwrap();
    let mut chained = x0.clone();
    for k in 1..=t {
        let z: Tensor<f64> = rng.standard_normal(&[n]);
        let (a, b) = (sched.alpha(k).sqrt(), sched.beta(k).sqrt());
        chained = chained.zip_map(&z, |x, z| a * x + b * z).unwrap();
    }
    let moments = |v: &Tensor<f64>| {
        let m = v.mean();
        (
            m,
            v.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64,
        )
    };
    let (m1, v1) = moments(&closed);
    let (m2, v2) = moments(&chained);
    let ab = sched.alpha_bar(t);
    assert!((m1 - 0.6 * ab.sqrt()).abs() < 0.02, "closed mean {m1}");
    assert!((m2 - 0.6 * ab.sqrt()).abs() < 0.02, "chained mean {m2}");
    assert!((v1 / (1.0 - ab) - 1.0).abs() < 0.03, "closed variance {v1}");
    assert!(
        (v2 / (1.0 - ab) - 1.0).abs() < 0.03,
        "chained variance {v2}"
    );
}

#[test]
fn training_reduces_the_loss() {
    // two clusters in 4-d
    let mut rng = Rng::new(2);
    let data: Vec<Tensor<f32>> = (0..64)
        .map(|i| {
            let c = if i % 2 == 0 { 0.5 } else { -0.5 };
            Tensor::from_fn(&[4], |_| c + 0.05 * rng.normal() as f32)
        })
        .collect();
    let arch = DenoiserArch::Mlp {
        dim: 4,
        hidden: 32,
        time_dim: 8,
    };
    let cfg = DiffusionTrainConfig {
        timesteps: 50,
        steps: 400,
        batch: 16,
        lr: 2e-3,
        crop: None,
        ..DiffusionTrainConfig::default()
    };
    let (_, losses) = train_diffusion(&data, &arch, &cfg, 0).unwrap();
    let mean = |s: &[anomaly_recon::diffusion::StepLoss]| {
        s.iter().map(|l| l.simple as f64).sum::<f64>() / s.len() as f64
    };
    let (first, last) = (mean(&losses[..50]), mean(&losses[350..]));
    assert!(last < 0.8 * first, "simple loss {first} -> {last}");
}

#[test]
fn variance_term_does_not_reach_the_noise_head() {
    let arch = DenoiserArch::Unet {
        channels: 1,
        base: 4,
        depth: 1,
        time_dim: 4,
    };
    let mut params = arch.init(&mut Rng::new(0)).unwrap();
    // give the zero-initialized heads real weights so every path is live
    let mut rng = Rng::new(1);
    let names: Vec<String> = params.names().cloned().collect();
    for n in names {
        let p = params.get_mut(&n).unwrap();
        *p = Tensor::from_fn(p.shape(), |_| 0.2 * rng.normal() as f32);
    }
    let sched = DiffusionSchedule::build(20, ScheduleKind::Cosine).unwrap();
    let x0: Tensor<f32> = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.uniform_range(-1.0, 1.0) as f32);
    let eps: Tensor<f32> = rng.standard_normal(&[2, 1, 4, 4]);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = hybrid_loss(&mut tape, &arch, &bound, &sched, &x0, &[1, 7], &eps, 1.0).unwrap();
    let grads = tape.backward(loss.vlb).unwrap();
    let mut head_v_moved = false;
    for (name, &var) in bound.iter() {
        let g = grads.get_or_zeros(var, tape.shape(var));
        if name.starts_with("head_eps.") {
            assert!(
                g.data().iter().all(|&v| v == 0.0),
                "{name} received gradient from L_vlb"
            );
        }
        if name.starts_with("head_v.") {
            head_v_moved |= g.data().iter().any(|&v| v != 0.0);
        }
    }
    assert!(head_v_moved, "variance head got no gradient");
}
