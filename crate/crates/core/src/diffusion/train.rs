use anomaly_tensor::{Adam, AdamConfig, ParamSet, Rng, Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::denoiser::DenoiserArch;
use super::loss::hybrid_loss;
use super::schedule::{DiffusionSchedule, ScheduleKind};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub gamma: f64,
    /// Train on random square crops of this size (image data only).
    pub crop: Option<usize>,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            timesteps: 200,
            schedule: ScheduleKind::Cosine,
            steps: 1500,
            batch: 8,
            lr: 1e-3,
            gamma: 0.001,
            crop: Some(32),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub simple: f32,
    pub vlb: f32,
    pub total: f32,
}

fn crop(x: &Tensor<f32>, size: usize, rng: &mut Rng) -> Result<Tensor<f32>> {
    let (c, h, w) = match *x.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::Data(format!("crop expects (C, H, W), got {s:?}"))),
    };
    if size > h || size > w {
        return Err(Error::Config(format!(
            "crop {size} larger than {h}x{w} sample"
        )));
    }
    let y0 = rng.below(h - size + 1);
    let x0 = rng.below(w - size + 1);
    Ok(Tensor::from_fn(&[c, size, size], |i| {
        let (ch, r) = (i / (size * size), i % (size * size));
        x.data()[ch * h * w + (y0 + r / size) * w + x0 + r % size]
    }))
}

/// Trains `arch` on `data` (samples in model space, all the same shape
/// unless cropping) and returns the parameters with the loss trajectory.
pub fn train_diffusion(
    data: &[Tensor<f32>],
    arch: &DenoiserArch,
    cfg: &DiffusionTrainConfig,
    seed: u64,
) -> Result<(ParamSet, Vec<StepLoss>)> {
    if data.is_empty() {
        return Err(Error::Data("diffusion training set is empty".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let sched = DiffusionSchedule::build(cfg.timesteps, cfg.schedule)?;
    let root = Rng::new(seed);
    let mut params = arch.init(&mut root.split(0))?;
    let mut rng = root.split(1);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let x = &data[rng.below(data.len())];
            batch.push(match cfg.crop {
                Some(size) => crop(x, size, &mut rng)?,
                None => x.clone(),
            });
        }
        let x0 = Tensor::stack(&batch)?;
        let t: Vec<usize> = (0..cfg.batch)
            .map(|_| 1 + rng.below(cfg.timesteps))
            .collect();
        let eps = rng.standard_normal(x0.shape());

        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape);
        let loss = hybrid_loss(&mut tape, arch, &bound, &sched, &x0, &t, &eps, cfg.gamma)?;
        let grads = tape.backward(loss.total)?;
        params.accumulate_grads(&bound, &grads)?;
        adam.step(&mut params)?;
        let rec = StepLoss {
            step,
            simple: tape.value(loss.simple).item()?,
            vlb: tape.value(loss.vlb).item()?,
            total: tape.value(loss.total).item()?,
        };
        if step % 100 == 0 {
            log::debug!(
                "diffusion step {step}: simple {:.4} vlb {:.4}",
                rec.simple,
                rec.vlb
            );
        }
        log.push(rec);
    }
    Ok((params, log))
}
