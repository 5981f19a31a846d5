//! Residual assembly, standardization, residual channel selection and the
//! per-pixel discriminator.

use anomaly_tensor::{ops, Bound, ParamSet, Real, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RrsMode {
    Max,
    Avg,
    #[default]
    MaxAndAvg,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RrsConfig {
    pub mode: RrsMode,
    /// Retention ratio in `(0, 1]`.
    pub p: f64,
}

impl Default for RrsConfig {
    fn default() -> Self {
        Self {
            mode: RrsMode::MaxAndAvg,
            p: 1.0 / 3.0,
        }
    }
}

impl RrsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Config(format!(
                "retention ratio must lie in (0, 1], got {}",
                self.p
            )));
        }
        Ok(())
    }

    /// Retained channel count `round(P m')`, at least 1, made even for the
    /// combined mode unless every channel is retained.
    pub fn retained(&self, total: usize) -> Result<usize> {
        self.validate()?;
        if total == 0 {
            return Err(Error::Data("no residual channels".into()));
        }
        let mut r = ((self.p * total as f64).round() as usize).clamp(1, total);
        if self.mode == RrsMode::MaxAndAvg && r < total && r % 2 == 1 {
            r += 1;
        }
        Ok(r)
    }
}

/// Channels of the `r` largest values, descending, ties to the lower index.
pub fn top_channels(stat: &[f64], r: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..stat.len()).collect();
    idx.sort_by(|&a, &b| stat[b].total_cmp(&stat[a]).then(a.cmp(&b)));
    idx.truncate(r);
    idx
}

/// Channel selection from per-channel spatial max (`gmp`) and mean (`gap`).
///
/// Keeping every channel returns a permutation in all modes; in the
/// combined mode the top half by max comes first, followed by the rest in
/// descending mean order.
pub fn select_channels(gmp: &[f64], gap: &[f64], mode: RrsMode, r: usize) -> Result<Vec<usize>> {
    let total = gmp.len();
    if gap.len() != total {
        return Err(Error::Data(format!(
            "{total} max statistics vs {} mean statistics",
            gap.len()
        )));
    }
    if r == 0 || r > total {
        return Err(Error::Config(format!(
            "cannot retain {r} of {total} residual channels"
        )));
    }
    Ok(match mode {
        RrsMode::Max => top_channels(gmp, r),
        RrsMode::Avg => top_channels(gap, r),
        RrsMode::MaxAndAvg if r == total => {
            let first = top_channels(gmp, total.div_ceil(2));
            let mut taken = vec![false; total];
            first.iter().for_each(|&c| taken[c] = true);
            let rest = top_channels(gap, total).into_iter().filter(|&c| !taken[c]);
            first.iter().copied().chain(rest).collect()
        }
        RrsMode::MaxAndAvg => {
            if r % 2 == 1 {
                return Err(Error::Config(format!(
                    "combined selection needs an even count, got {r}"
                )));
            }
            let mut out = top_channels(gmp, r / 2);
            out.extend(top_channels(gap, r / 2));
            out
        }
    })
}

/// Per-sample selection for a batch `(N, m', h, w)`.
pub fn select_batch_indices<T: Real>(e: &Tensor<T>, cfg: &RrsConfig) -> Result<Vec<Vec<usize>>> {
    let (n, c, plane) = match *e.shape() {
        [n, c, h, w] => (n, c, h * w),
        ref s => {
            return Err(Error::Data(format!(
                "residuals must be (N, C, H, W), got {s:?}"
            )))
        }
    };
    let r = cfg.retained(c)?;
    (0..n)
        .map(|s| {
            let mut gmp = Vec::with_capacity(c);
            let mut gap = Vec::with_capacity(c);
            for ch in 0..c {
                let m = &e.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                gmp.push(
                    m.iter()
                        .map(|v| v.as_f64())
                        .fold(f64::NEG_INFINITY, f64::max),
                );
                gap.push(m.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64);
            }
            select_channels(&gmp, &gap, cfg.mode, r)
        })
        .collect()
}

/// Selected residuals `(r, h, w)` of one assembled residual `(m', h, w)`.
pub fn rrs_select(e: &Tensor<f32>, cfg: &RrsConfig) -> Result<Tensor<f32>> {
    let s = e.shape();
    if s.len() != 3 {
        return Err(Error::Data(format!(
            "residual must be (C, H, W), got {s:?}"
        )));
    }
    let b = e.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let idx = select_batch_indices(&b, cfg)?;
    let r = idx[0].len();
    Ok(ops::gather_channels(&b, &idx)?.reshape(&[r, s[1], s[2]])?)
}

/// Squared residuals per scale, upsampled to the finest extent and
/// concatenated layer-major: `(N, sum m_k, h', w')`.
pub fn assemble_residuals<T: Real>(
    tape: &mut Tape<T>,
    features: &[Var],
    recon: &[Var],
) -> Result<Var> {
    if features.is_empty() || features.len() != recon.len() {
        return Err(Error::Data(
            "residual assembly needs matching, non-empty scales".into(),
        ));
    }
    let h = features
        .iter()
        .map(|&f| tape.shape(f)[2])
        .max()
        .expect("non-empty");
    let w = features
        .iter()
        .map(|&f| tape.shape(f)[3])
        .max()
        .expect("non-empty");
    let mut parts = Vec::with_capacity(features.len());
    for (&f, &g) in features.iter().zip(recon) {
        let d = tape.sub(f, g)?;
        let e = tape.square(d)?;
        let (eh, ew) = (tape.shape(e)[2], tape.shape(e)[3]);
        parts.push(if (eh, ew) == (h, w) {
            e
        } else {
            tape.resize_bilinear(e, h, w)?
        });
    }
    Ok(if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_channels(&parts)?
    })
}

/// Per-channel standardization without affine parameters. Training passes
/// use batch statistics and update running estimates; evaluation uses the
/// running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl Standardizer {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn train<T: Real>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let count: usize = tape.shape(x)[0] * tape.shape(x)[2..].iter().product::<usize>();
        let (y, mean, var) = tape.batch_norm(x, self.eps)?;
        if mean.len() != self.mean.len() {
            return Err(Error::Data(format!(
                "{} channels vs {} tracked",
                mean.len(),
                self.mean.len()
            )));
        }
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for c in 0..mean.len() {
            self.mean[c] += self.momentum * (mean[c] - self.mean[c]);
            self.var[c] += self.momentum * (var[c] * unbias - self.var[c]);
        }
        Ok(y)
    }

    pub fn eval<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let (scale, shift) = self.coefficients();
        Ok(tape.channel_affine(x, &scale, &shift)?)
    }

    fn coefficients<T: Real>(&self) -> (Vec<T>, Vec<T>) {
        self.mean
            .iter()
            .zip(&self.var)
            .map(|(&m, &v)| {
                let s = 1.0 / (v + self.eps).sqrt();
                (T::from_f64_lossy(s), T::from_f64_lossy(-m * s))
            })
            .unzip()
    }

    /// Stored as a `(2, C)` tensor of running mean and variance.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self
            .mean
            .iter()
            .chain(&self.var)
            .map(|&v| v as f32)
            .collect();
        Tensor::new(&[2, self.mean.len()], data).expect("stat shape")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let c = match *t.shape() {
            [2, c] => c,
            ref s => {
                return Err(Error::Data(format!(
                    "standardizer stats must be (2, C), got {s:?}"
                )))
            }
        };
        let mut s = Self::new(c);
        for i in 0..c {
            s.mean[i] = t.data()[i] as f64;
            s.var[i] = t.data()[c + i] as f64;
        }
        Ok(s)
    }
}

/// Per-pixel MLP `r -> hidden -> hidden -> 1` on selected residuals.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub channels: usize,
    pub hidden: usize,
}

impl Discriminator {
    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) -> Result<()> {
        nn::init_dense(params, rng, "disc.0", self.channels, self.hidden, false)?;
        nn::init_dense(params, rng, "disc.1", self.hidden, self.hidden, false)?;
        nn::init_dense(params, rng, "disc.2", self.hidden, 1, true)?;
        Ok(())
    }

    /// Logits `(N, 1, h', w')` for selected residuals `(N, r, h', w')`.
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        if tape.shape(x).get(1) != Some(&self.channels) {
            return Err(Error::Data(format!(
                "discriminator expects {} channels, got {:?}",
                self.channels,
                tape.shape(x)
            )));
        }
        let h = nn::dense(tape, p, "disc.0", x)?;
        let h = tape.relu(h)?;
        let h = nn::dense(tape, p, "disc.1", h)?;
        let h = tape.relu(h)?;
        nn::dense(tape, p, "disc.2", h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    /// Pixel scores `(H, W)` in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub image_score: f32,
}

impl ScoreMap {
    pub fn new(pixels: Tensor<f32>) -> Self {
        let image_score = pixels.max().unwrap_or(0.0);
        Self {
            pixels,
            image_score,
        }
    }
}

/// Sigmoid of `(N, 1, h', w')` logits, upsampled to `(h, w)`.
pub fn score_maps(logits: &Tensor<f32>, h: usize, w: usize) -> Result<Vec<ScoreMap>> {
    let probs = logits.map(|z| 1.0 / (1.0 + (-z).exp()));
    let up = ops::resize_bilinear(&probs, h, w)?;
    (0..up.shape()[0])
        .map(|n| Ok(ScoreMap::new(up.sample(n)?.reshape(&[h, w])?)))
        .collect()
}

pub const SEG_EPS: f64 = 1e-7;

/// Mean binary cross-entropy of probabilities against a binary mask of the
/// same shape, with probabilities clamped to `[eps, 1 - eps]`.
pub fn seg_loss(scores: &Tensor<f32>, mask: &Tensor<f32>) -> Result<f64> {
    if scores.shape() != mask.shape() || scores.is_empty() {
        return Err(Error::Data(format!(
            "scores {:?} vs mask {:?}",
            scores.shape(),
            mask.shape()
        )));
    }
    let total: f64 = scores
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&p, &y)| {
            let p = (p as f64).clamp(SEG_EPS, 1.0 - SEG_EPS);
            let y = y as f64;
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// Nearest-neighbor resize of `(N, H, W)` masks to `(N, 1, h, w)`.
pub fn downsample_masks(masks: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let s = masks.shape();
    if s.len() != 3 {
        return Err(Error::Data(format!("masks must be (N, H, W), got {s:?}")));
    }
    let b = masks.clone().reshape(&[s[0], 1, s[1], s[2]])?;
    Ok(ops::resize_nearest(&b, h, w)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_max_selection() {
        let gmp = [3.0, 1.0, 4.0, 2.0];
        assert_eq!(
            select_channels(&gmp, &[0.0; 4], RrsMode::Max, 2).unwrap(),
            [2, 0]
        );
    }

    #[test]
    fn combined_mode_keeps_duplicates() {
        let gmp = [0.1, 5.0, 0.2];
        let gap = [0.0, 3.0, 1.0];
        assert_eq!(
            select_channels(&gmp, &gap, RrsMode::MaxAndAvg, 2).unwrap(),
            [1, 1]
        );
    }

    #[test]
    fn full_retention_is_a_permutation() {
        let gmp = [0.3, 0.9, 0.1, 0.9, 0.5];
        let gap = [0.8, 0.1, 0.7, 0.2, 0.0];
        for mode in [RrsMode::Max, RrsMode::Avg, RrsMode::MaxAndAvg] {
            let mut sel = select_channels(&gmp, &gap, mode, 5).unwrap();
            sel.sort();
            assert_eq!(sel, [0, 1, 2, 3, 4]);
        }
        assert_eq!(
            select_channels(&gmp, &gap, RrsMode::MaxAndAvg, 5).unwrap(),
            [1, 3, 4, 0, 2]
        );
    }

    #[test]
    fn retained_counts() {
        let cfg = RrsConfig::default();
        assert_eq!(cfg.retained(96).unwrap(), 32);
        assert_eq!(cfg.retained(9).unwrap(), 4);
        let full = RrsConfig { p: 1.0, ..cfg };
        assert_eq!(full.retained(7).unwrap(), 7);
        let one = RrsConfig {
            mode: RrsMode::Max,
            p: 0.01,
        };
        assert_eq!(one.retained(10).unwrap(), 1);
        assert!(RrsConfig { p: 0.0, ..cfg }.retained(4).is_err());
        assert!(RrsConfig { p: 1.5, ..cfg }.retained(4).is_err());
    }

    #[test]
    fn fresh_discriminator_scores_half() {
        let d = Discriminator {
            channels: 3,
            hidden: 8,
        };
        let mut p = ParamSet::new();
        d.init(&mut p, &mut Rng::new(0)).unwrap();
        let mut tape = Tape::<f32>::new();
        let b = p.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let z = d.logits(&mut tape, &b, x).unwrap();
        let maps = score_maps(tape.value(z), 16, 16).unwrap();
        assert_eq!(maps[0].pixels.shape(), [16, 16]);
        assert!(maps[0].pixels.data().iter().all(|&v| v == 0.5));
        assert_eq!(maps[0].image_score, 0.5);
        let bad = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(d.logits(&mut tape, &b, bad).is_err());
    }

    #[test]
    fn seg_loss_values() {
        let m = Tensor::from_fn(&[2, 2], |i| (i % 2) as f32);
        assert!(seg_loss(&m, &m).unwrap() <= 1e-6);
        let half = Tensor::full(&[2, 2], 0.5);
        assert!((seg_loss(&half, &m).unwrap() - 2f64.ln()).abs() < 1e-12);
        let one = seg_loss(&Tensor::full(&[1, 1], 0.8), &Tensor::ones(&[1, 1])).unwrap();
        assert!((one + 0.8f32.ln() as f64).abs() < 1e-7);
    }

    #[test]
    fn standardizer_round_trips_through_tensor() {
        let mut s = Standardizer::new(3);
        s.mean = vec![0.5, -1.0, 2.0];
        s.var = vec![1.5, 0.25, 4.0];
        assert_eq!(Standardizer::from_tensor(&s.to_tensor()).unwrap(), s);
    }
}
