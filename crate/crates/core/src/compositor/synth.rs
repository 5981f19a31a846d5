use std::path::{Path, PathBuf};

use anomaly_tensor::{ops, Rng, Tensor};
use serde::{Deserialize, Serialize};

use super::blend::{blend, make_mask};
use super::foreground::foreground_mask;
use super::perlin::{perlin_noise, random_grid};
use crate::error::{Error, IoContext, Result};
use crate::image_io;

/// Training triplet. Normal samples carry an all-zero mask and `A = I`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalySample {
    pub a: Tensor<f32>,
    pub i: Tensor<f32>,
    pub m: Tensor<f32>,
    pub delta: f32,
    /// Index of the normal image `I` was taken from.
    pub source: usize,
    /// Whether an anomaly was requested for this slot.
    pub anomalous: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Share of anomalous samples in the stream.
    pub anomaly_fraction: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub perlin_grids: Vec<usize>,
    pub mask_threshold: f32,
    /// Restrict masks to the Otsu foreground. Off for texture categories,
    /// where the whole frame is object.
    pub use_foreground: bool,
    pub max_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            anomaly_fraction: 0.5,
            delta_min: 0.5,
            delta_max: 1.0,
            perlin_grids: vec![2, 4, 8, 16],
            mask_threshold: 0.5,
            use_foreground: true,
            max_attempts: 8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.anomaly_fraction) {
            return Err(Error::Config(format!(
                "anomaly_fraction must lie in [0, 1], got {}",
                self.anomaly_fraction
            )));
        }
        if !(0.0 <= self.delta_min && self.delta_min <= self.delta_max && self.delta_max <= 1.0) {
            return Err(Error::Config(format!(
                "opacity range [{}, {}] must lie within [0, 1]",
                self.delta_min, self.delta_max
            )));
        }
        if self.perlin_grids.is_empty() || self.perlin_grids.contains(&0) {
            return Err(Error::Config(
                "perlin_grids must be non-empty and positive".into(),
            ));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// Slot `i` of a stream with anomaly share `f` is anomalous when
/// `floor((i + 1) f) > floor(i f)`, which spreads anomalies evenly.
pub fn is_anomalous_slot(i: usize, fraction: f64) -> bool {
    ((i + 1) as f64 * fraction).floor() > (i as f64 * fraction).floor()
}

/// Bilinear resize of a `(C, H, W)` image.
pub fn resize_image(img: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::Data(format!("expected (C, H, W) image, got {s:?}")));
    }
    if s[1] == h && s[2] == w {
        return Ok(img.clone());
    }
    let batched = img.clone().reshape(&[1, s[0], s[1], s[2]])?;
    Ok(ops::resize_bilinear(&batched, h, w)?.reshape(&[s[0], h, w])?)
}

/// One anomaly triplet from `normal` and `donor`. When no non-empty mask
/// is found within the attempt budget the normal image is returned
/// unchanged with an empty mask.
pub fn synthesize(
    normal: &Tensor<f32>,
    donor: &Tensor<f32>,
    cfg: &SynthConfig,
    rng: &mut Rng,
) -> Result<(Tensor<f32>, Tensor<f32>, f32)> {
    let (h, w) = (normal.shape()[1], normal.shape()[2]);
    let fg = if cfg.use_foreground {
        foreground_mask(normal)?.mask
    } else {
        Tensor::ones(&[h, w])
    };
    let delta = rng.uniform_range(cfg.delta_min, cfg.delta_max) as f32;
    for _ in 0..cfg.max_attempts {
        let gx = random_grid(&cfg.perlin_grids, rng);
        let gy = random_grid(&cfg.perlin_grids, rng);
        let field = perlin_noise(h, w, gx, gy, rng)?;
        let m = make_mask(&field, &fg, cfg.mask_threshold)?.mask;
        if m.data().iter().any(|&v| v > 0.0) {
            let a = blend(normal, donor, &m, delta)?;
            return Ok((a, m, delta));
        }
    }
    log::debug!("synth: no usable mask after {} attempts", cfg.max_attempts);
    Ok((normal.clone(), Tensor::zeros(&[h, w]), delta))
}

/// Deterministic, randomly addressable stream of training triplets.
pub struct SynthStream<'a> {
    normals: &'a [Tensor<f32>],
    donors: &'a [Tensor<f32>],
    cfg: &'a SynthConfig,
    root: Rng,
    /// Emit only anomalous slots (each slot still counts toward the index).
    anomalies_only: bool,
    next: usize,
}

impl<'a> SynthStream<'a> {
    pub fn new(
        normals: &'a [Tensor<f32>],
        donors: &'a [Tensor<f32>],
        cfg: &'a SynthConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if normals.is_empty() {
            return Err(Error::Data("no normal images to synthesize from".into()));
        }
        if donors.is_empty() && cfg.anomaly_fraction > 0.0 {
            return Err(Error::Data("donor source is empty".into()));
        }
        if let Some(bad) = donors.iter().find(|d| d.shape() != normals[0].shape()) {
            return Err(Error::Data(format!(
                "donor {:?} does not match image {:?}",
                bad.shape(),
                normals[0].shape()
            )));
        }
        Ok(Self {
            normals,
            donors,
            cfg,
            root: Rng::new(seed),
            anomalies_only: false,
            next: 0,
        })
    }

    /// Every emitted sample carries an anomaly (anomaly share forced to 1).
    pub fn anomalies_only(mut self) -> Self {
        self.anomalies_only = true;
        self
    }

    pub fn sample(&self, index: usize) -> Result<AnomalySample> {
        let mut rng = self.root.split(index as u64);
        let source = rng.below(self.normals.len());
        let normal = &self.normals[source];
        let fraction = if self.anomalies_only {
            1.0
        } else {
            self.cfg.anomaly_fraction
        };
        if !is_anomalous_slot(index, fraction) {
            return Ok(AnomalySample {
                a: normal.clone(),
                i: normal.clone(),
                m: Tensor::zeros(&normal.shape()[1..]),
                delta: 0.0,
                source,
                anomalous: false,
            });
        }
        let donor = &self.donors[rng.below(self.donors.len())];
        let (a, m, delta) = synthesize(normal, donor, self.cfg, &mut rng)?;
        Ok(AnomalySample {
            a,
            i: normal.clone(),
            m,
            delta,
            source,
            anomalous: true,
        })
    }
}

impl Iterator for SynthStream<'_> {
    type Item = Result<AnomalySample>;

    fn next(&mut self) -> Option<Self::Item> {
        let s = self.sample(self.next);
        self.next += 1;
        Some(s)
    }
}

/// Sorted `*.png` files directly under `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingPath(dir.to_path_buf()));
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).at(dir)? {
        let p = entry.at(dir)?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every PNG in `dir` as a donor, resized to `(h, w)`.
pub fn load_donors(dir: &Path, h: usize, w: usize) -> Result<Vec<Tensor<f32>>> {
    let files = list_pngs(dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!(
            "donor directory {} has no PNG images",
            dir.display()
        )));
    }
    files
        .iter()
        .map(|p| resize_image(&image_io::load_rgb(p)?, h, w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: usize, seed: u64) -> Vec<Tensor<f32>> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| Tensor::from_fn(&[3, 16, 16], |_| rng.uniform() as f32))
            .collect()
    }

    #[test]
    fn slots_alternate_at_half() {
        let flags: Vec<bool> = (0..6).map(|i| is_anomalous_slot(i, 0.5)).collect();
        assert_eq!(flags, [false, true, false, true, false, true]);
        assert!((0..50).all(|i| !is_anomalous_slot(i, 0.0)));
        assert!((0..50).all(|i| is_anomalous_slot(i, 1.0)));
    }

    #[test]
    fn zero_fraction_emits_pure_normals() {
        let normals = images(3, 1);
        let cfg = SynthConfig {
            anomaly_fraction: 0.0,
            ..SynthConfig::default()
        };
        let stream = SynthStream::new(&normals, &[], &cfg, 4).unwrap();
        for s in stream.take(20) {
            let s = s.unwrap();
            assert_eq!(s.a, s.i);
            assert!(s.m.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn empty_donors_rejected() {
        let normals = images(2, 1);
        let cfg = SynthConfig::default();
        assert!(SynthStream::new(&normals, &[], &cfg, 0).is_err());
    }

    #[test]
    fn stream_is_deterministic_and_exact_outside_mask() {
        let normals = images(4, 1);
        let donors = images(3, 2);
        let cfg = SynthConfig {
            use_foreground: false,
            ..SynthConfig::default()
        };
        let a: Vec<_> = SynthStream::new(&normals, &donors, &cfg, 7)
            .unwrap()
            .take(12)
            .map(|s| s.unwrap())
            .collect();
        let b: Vec<_> = SynthStream::new(&normals, &donors, &cfg, 7)
            .unwrap()
            .take(12)
            .map(|s| s.unwrap())
            .collect();
        assert_eq!(a, b);
        for s in &a {
            let plane = s.m.len();
            for (k, (&av, &iv)) in s.a.data().iter().zip(s.i.data()).enumerate() {
                if s.m.data()[k % plane] == 0.0 {
                    assert_eq!(av, iv);
                }
            }
            if s.anomalous {
                assert!((0.5..=1.0).contains(&s.delta));
            }
        }
    }
}
