//! The trainable detector: reconstructors, residual standardization and
//! selection, and the discriminator, updated jointly on
//! `L_recon + L_seg`.

use anomaly_tensor::{Adam, Bound, ParamSet, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reconstruction::{recon_loss, ReconConfig, Reconstructors};
use crate::rrs::{
    assemble_residuals, downsample_masks, score_maps, select_batch_indices, Discriminator,
    RrsConfig, ScoreMap, Standardizer,
};

/// Resolution at which the segmentation loss is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegResolution {
    /// Residual resolution, against a nearest-downsampled mask.
    #[default]
    Native,
    /// Image resolution, after bilinear upsampling of the logits.
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub recon: ReconConfig,
    pub rrs: RrsConfig,
    pub disc_hidden: usize,
    pub seg_resolution: SegResolution,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            recon: ReconConfig::default(),
            rrs: RrsConfig::default(),
            disc_hidden: 128,
            seg_resolution: SegResolution::Native,
        }
    }
}

/// Selected features of anomalous and normal images, per scale
/// `(N, m_k, h_k, w_k)`, with masks `(N, H, W)`.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub features_a: Vec<Tensor<f32>>,
    pub features_i: Vec<Tensor<f32>>,
    pub masks: Tensor<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub recon: f32,
    pub seg: f32,
}

const STATS_KEY: &str = "standardizer";

pub struct DetectionModel {
    pub cfg: ModelConfig,
    pub recon: Reconstructors,
    pub disc: Discriminator,
    pub params: ParamSet,
    pub stats: Standardizer,
    pub image_hw: (usize, usize),
}

impl DetectionModel {
    pub fn new(
        m: &[usize],
        cfg: &ModelConfig,
        image_hw: (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        let root = Rng::new(seed);
        let mut params = ParamSet::new();
        let recon = Reconstructors::build(m, &cfg.recon, &mut params, &mut root.split(0))?;
        let total: usize = m.iter().sum();
        let disc = Discriminator {
            channels: cfg.rrs.retained(total)?,
            hidden: cfg.disc_hidden,
        };
        disc.init(&mut params, &mut root.split(1))?;
        Ok(Self {
            cfg: cfg.clone(),
            recon,
            disc,
            params,
            stats: Standardizer::new(total),
            image_hw,
        })
    }

    /// Rebuilds the model from a checkpoint written by [`Self::to_checkpoint`].
    pub fn from_checkpoint(
        m: &[usize],
        cfg: &ModelConfig,
        image_hw: (usize, usize),
        checkpoint: &ParamSet,
    ) -> Result<Self> {
        let mut model = Self::new(m, cfg, image_hw, 0)?;
        let mut params = ParamSet::new();
        for (name, p) in checkpoint.iter() {
            if name == STATS_KEY {
                model.stats = Standardizer::from_tensor(&p.value)?;
            } else {
                params.insert(name.clone(), p.value.clone())?;
            }
        }
        let expected: Vec<&String> = model.params.names().collect();
        let found: Vec<&String> = params.names().collect();
        if expected != found {
            return Err(Error::Data(
                "checkpoint does not match the model layout".into(),
            ));
        }
        for (name, p) in model.params.iter() {
            if params.get(name).map(|t| t.shape()) != Some(p.value.shape()) {
                return Err(Error::Data(format!(
                    "checkpoint tensor {name} has the wrong shape"
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn to_checkpoint(&self) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, p) in self.params.iter() {
            out.insert(name.clone(), p.value.clone())?;
        }
        out.insert(STATS_KEY, self.stats.to_tensor())?;
        Ok(out)
    }

    fn check_batch(&self, features: &[Tensor<f32>]) -> Result<usize> {
        let m = self.recon.dims();
        if features.len() != m.len() {
            return Err(Error::Data(format!(
                "{} scales, model has {}",
                features.len(),
                m.len()
            )));
        }
        let n = features[0].shape()[0];
        for (k, f) in features.iter().enumerate() {
            if f.rank() != 4 || f.shape()[0] != n || f.shape()[1] != m[k] {
                return Err(Error::Data(format!(
                    "scale {k}: {:?}, expected ({n}, {}, h, w)",
                    f.shape(),
                    m[k]
                )));
            }
        }
        Ok(n)
    }

    /// Records reconstruction, standardized residuals and selection;
    /// returns `(reconstructions, logits)`. Training-mode statistics are
    /// used and updated when `stats` is given, frozen ones otherwise.
    fn record(
        &self,
        tape: &mut Tape<f32>,
        bound: &Bound,
        inputs: &[Var],
        stats: Option<&mut Standardizer>,
    ) -> Result<(Vec<Var>, Var)> {
        let outs = self.recon.forward(tape, bound, inputs)?;
        let e = assemble_residuals(tape, inputs, &outs)?;
        let e = match stats {
            Some(s) => s.train(tape, e)?,
            None => self.stats.eval(tape, e)?,
        };
        let idx = select_batch_indices(tape.value(e), &self.cfg.rrs)?;
        let sel = tape.gather_channels(e, idx)?;
        let logits = self.disc.logits(tape, bound, sel)?;
        Ok((outs, logits))
    }

    /// Losses of a batch without touching parameters or statistics.
    pub fn losses(&self, batch: &TrainBatch) -> Result<StepMetrics> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let mut stats = self.stats.clone();
        let (l_recon, l_seg) = self.record_losses(&mut tape, &bound, batch, &mut stats)?;
        Ok(StepMetrics {
            recon: tape.value(l_recon).item()?,
            seg: tape.value(l_seg).item()?,
        })
    }

    fn record_losses(
        &self,
        tape: &mut Tape<f32>,
        bound: &Bound,
        batch: &TrainBatch,
        stats: &mut Standardizer,
    ) -> Result<(Var, Var)> {
        self.check_batch(&batch.features_a)?;
        self.check_batch(&batch.features_i)?;
        let inputs: Vec<Var> = batch
            .features_a
            .iter()
            .map(|f| tape.constant(f.clone()))
            .collect();
        let targets: Vec<Var> = batch
            .features_i
            .iter()
            .map(|f| tape.constant(f.clone()))
            .collect();
        let (outs, logits) = self.record(tape, bound, &inputs, Some(stats))?;
        let l_recon = recon_loss(tape, &outs, &targets, self.cfg.recon.loss_norm)?;
        let l_seg = match self.cfg.seg_resolution {
            SegResolution::Native => {
                let (h, w) = (tape.shape(logits)[2], tape.shape(logits)[3]);
                tape.bce_with_logits(logits, downsample_masks(&batch.masks, h, w)?)?
            }
            SegResolution::Image => {
                let (h, w) = self.image_hw;
                let up = tape.resize_bilinear(logits, h, w)?;
                tape.bce_with_logits(up, downsample_masks(&batch.masks, h, w)?)?
            }
        };
        Ok((l_recon, l_seg))
    }

    /// One joint optimizer step on `L_recon + L_seg`.
    pub fn train_step(&mut self, adam: &mut Adam, batch: &TrainBatch) -> Result<StepMetrics> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut stats = self.stats.clone();
        let (l_recon, l_seg) = self.record_losses(&mut tape, &bound, batch, &mut stats)?;
        self.stats = stats;
        let total = tape.add(l_recon, l_seg)?;
        let grads = tape.backward(total)?;
        self.params.accumulate_grads(&bound, &grads)?;
        adam.step(&mut self.params)?;
        Ok(StepMetrics {
            recon: tape.value(l_recon).item()?,
            seg: tape.value(l_seg).item()?,
        })
    }

    /// Score maps at image resolution for selected features of a batch.
    pub fn score(&self, features: &[Tensor<f32>]) -> Result<Vec<ScoreMap>> {
        self.check_batch(features)?;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let inputs: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
        let (_, logits) = self.record(&mut tape, &bound, &inputs, None)?;
        score_maps(tape.value(logits), self.image_hw.0, self.image_hw.1)
    }
}
