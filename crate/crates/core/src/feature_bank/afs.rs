use std::path::Path;

use anomaly_tensor::io::atomic_write;
use anomaly_tensor::{ops, Tensor};
use serde::{Deserialize, Serialize};

use super::extractor::FeatureStack;
use crate::error::{Error, Result};

/// How each aligned squared-difference map is scaled before comparison
/// with the mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapNorm {
    /// `(x - min) / (max - min)`; constant maps become all zeros.
    #[default]
    MinMax,
    /// `x / max`; all-zero maps stay zero.
    Max,
}

const GUARD: f32 = 1e-12;

/// Normalizes `(N, C, H, W)` maps in place, per sample and channel.
pub fn normalize_maps(maps: &mut Tensor<f32>, norm: MapNorm) {
    let plane: usize = maps.shape()[2..].iter().product();
    for m in maps.data_mut().chunks_mut(plane) {
        let hi = m.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lo = match norm {
            MapNorm::MinMax => m.iter().copied().fold(f32::INFINITY, f32::min),
            MapNorm::Max => 0.0,
        };
        let range = hi - lo;
        if range <= GUARD {
            m.iter_mut().for_each(|v| *v = 0.0);
        } else {
            m.iter_mut().for_each(|v| *v = (*v - lo) / range);
        }
    }
}

/// Mean squared deviation between a normalized map and a mask.
pub fn map_loss(normalized: &[f32], mask: &[f32]) -> f64 {
    let s: f64 = normalized
        .iter()
        .zip(mask)
        .map(|(&f, &m)| ((f - m) as f64).powi(2))
        .sum();
    s / normalized.len() as f64
}

/// Per-channel sums of the alignment loss, accumulated over triplets.
#[derive(Clone, Debug)]
pub struct AfsAccumulator {
    norm: MapNorm,
    sums: Vec<Vec<f64>>,
    count: usize,
}

impl AfsAccumulator {
    pub fn new(channels: &[usize], norm: MapNorm) -> Self {
        Self {
            norm,
            sums: channels.iter().map(|&c| vec![0.0; c]).collect(),
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Adds a batch: per layer, features of `A` and `I` as
    /// `(N, c_k, h_k, w_k)`, and masks `(N, H, W)`.
    pub fn add_batch(
        &mut self,
        feats_a: &[Tensor<f32>],
        feats_i: &[Tensor<f32>],
        masks: &Tensor<f32>,
    ) -> Result<()> {
        if feats_a.len() != self.sums.len() || feats_i.len() != self.sums.len() {
            return Err(Error::Data(format!(
                "expected {} layers, got {}/{}",
                self.sums.len(),
                feats_a.len(),
                feats_i.len()
            )));
        }
        let (n, h, w) = match *masks.shape() {
            [n, h, w] => (n, h, w),
            ref s => return Err(Error::Data(format!("masks must be (N, H, W), got {s:?}"))),
        };
        for (k, (fa, fi)) in feats_a.iter().zip(feats_i).enumerate() {
            let c = self.sums[k].len();
            if fa.shape() != fi.shape()
                || fa.rank() != 4
                || fa.shape()[0] != n
                || fa.shape()[1] != c
            {
                return Err(Error::Data(format!(
                    "layer {k}: A {:?}, I {:?}, expected ({n}, {c}, h, w)",
                    fa.shape(),
                    fi.shape()
                )));
            }
            let sq = fa.zip_map(fi, |a, b| (a - b) * (a - b))?;
            let mut aligned = ops::resize_bilinear(&sq, h, w)?;
            normalize_maps(&mut aligned, self.norm);
            let plane = h * w;
            for s in 0..n {
                let mask = &masks.data()[s * plane..(s + 1) * plane];
                for ch in 0..c {
                    let off = (s * c + ch) * plane;
                    self.sums[k][ch] += map_loss(&aligned.data()[off..off + plane], mask);
                }
            }
        }
        self.count += n;
        Ok(())
    }

    /// Mean loss per layer and channel.
    pub fn losses(&self) -> Result<Vec<Vec<f64>>> {
        if self.count == 0 {
            return Err(Error::Data(
                "feature selection needs at least one triplet".into(),
            ));
        }
        Ok(self
            .sums
            .iter()
            .map(|l| l.iter().map(|s| s / self.count as f64).collect())
            .collect())
    }
}

/// Alignment loss of one channel over single-image triplets.
pub fn afs_score(
    layer: usize,
    channel: usize,
    feats_a: &[FeatureStack],
    feats_i: &[FeatureStack],
    masks: &[Tensor<f32>],
    norm: MapNorm,
) -> Result<f64> {
    if feats_a.is_empty() || feats_a.len() != feats_i.len() || feats_a.len() != masks.len() {
        return Err(Error::Data(
            "afs_score needs matching, non-empty triplets".into(),
        ));
    }
    let mut acc = AfsAccumulator::new(&[1], norm);
    for ((a, i), m) in feats_a.iter().zip(feats_i).zip(masks) {
        let pick = |s: &FeatureStack| -> Result<Tensor<f32>> {
            let l = s
                .layers
                .get(layer)
                .ok_or_else(|| Error::Data(format!("no layer {layer}")))?;
            let (h, w) = (l.shape()[1], l.shape()[2]);
            if channel >= l.shape()[0] {
                return Err(Error::Data(format!(
                    "channel {channel} out of {}",
                    l.shape()[0]
                )));
            }
            let batched = l.clone().reshape(&[1, l.shape()[0], h, w])?;
            Ok(ops::gather_channels(&batched, &[vec![channel]])?)
        };
        let mh = m.shape().to_vec();
        let mask = m.clone().reshape(&[1, mh[0], mh[1]])?;
        acc.add_batch(&[pick(a)?], &[pick(i)?], &mask)?;
    }
    Ok(acc.losses()?[0][0])
}

/// Channel order by ascending loss, ties to the lower index.
pub fn rank_channels(losses: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub m: usize,
    /// Selected channels, best first.
    pub indices: Vec<usize>,
    /// Loss of every channel of the layer, by channel index.
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AfsIndexCache {
    pub extractor_id: String,
    pub afs_sample_digest: String,
    pub layers: Vec<LayerSelection>,
}

impl AfsIndexCache {
    /// Keeps the `m[k]` lowest-loss channels of every layer.
    pub fn from_losses(
        extractor_id: &str,
        digest: &str,
        losses: Vec<Vec<f64>>,
        m: &[usize],
    ) -> Result<Self> {
        if m.len() != losses.len() {
            return Err(Error::Config(format!(
                "{} selection sizes for {} layers",
                m.len(),
                losses.len()
            )));
        }
        let layers = losses
            .into_iter()
            .zip(m)
            .enumerate()
            .map(|(k, (l, &mk))| {
                if mk == 0 || mk > l.len() {
                    return Err(Error::Config(format!(
                        "layer {k}: cannot keep {mk} of {} channels",
                        l.len()
                    )));
                }
                let mut indices = rank_channels(&l);
                indices.truncate(mk);
                Ok(LayerSelection {
                    m: mk,
                    indices,
                    losses: l,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cache = Self {
            extractor_id: extractor_id.to_string(),
            afs_sample_digest: digest.to_string(),
            layers,
        };
        cache.validate()?;
        Ok(cache)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, l) in self.layers.iter().enumerate() {
            let mut seen = vec![false; l.losses.len()];
            if l.indices.len() != l.m || l.m == 0 {
                return Err(Error::Data(format!(
                    "layer {k}: {} indices for m = {}",
                    l.indices.len(),
                    l.m
                )));
            }
            for &i in &l.indices {
                if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Data(format!(
                        "layer {k}: invalid or repeated index {i}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn m(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.m).collect()
    }

    pub fn indices(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.indices.clone()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        atomic_write(path, &json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cache: Self = serde_json::from_slice(&bytes)?;
        cache.validate()?;
        Ok(cache)
    }

    /// Loads and checks the cache against the extractor in use.
    pub fn load_for(path: &Path, extractor_id: &str) -> Result<Self> {
        let cache = Self::load(path)?;
        if cache.extractor_id != extractor_id {
            return Err(Error::Provenance(format!(
                "{} was built for extractor '{}', not '{extractor_id}'",
                path.display(),
                cache.extractor_id
            )));
        }
        Ok(cache)
    }
}

/// Returns the cache at `path` when it matches `(extractor_id, digest)`;
/// otherwise computes losses with `compute`, selects, and persists.
/// The flag reports a cache hit.
pub fn afs_select_cached(
    path: &Path,
    extractor_id: &str,
    digest: &str,
    m: &[usize],
    compute: impl FnOnce() -> Result<Vec<Vec<f64>>>,
) -> Result<(AfsIndexCache, bool)> {
    if path.is_file() {
        let cache = AfsIndexCache::load_for(path, extractor_id)?;
        if cache.afs_sample_digest == digest && cache.m() == m {
            return Ok((cache, true));
        }
    }
    let cache = AfsIndexCache::from_losses(extractor_id, digest, compute()?, m)?;
    cache.save(path)?;
    Ok((cache, false))
}

/// Gathers the cached channels of every layer, in cached order.
pub fn apply_selection(stack: &FeatureStack, cache: &AfsIndexCache) -> Result<FeatureStack> {
    if stack.extractor_id != cache.extractor_id {
        return Err(Error::Provenance(format!(
            "features from '{}' but selection built for '{}'",
            stack.extractor_id, cache.extractor_id
        )));
    }
    if stack.layers.len() != cache.layers.len() {
        return Err(Error::Data(format!(
            "{} feature layers vs {} cached layers",
            stack.layers.len(),
            cache.layers.len()
        )));
    }
    let layers = stack
        .layers
        .iter()
        .zip(&cache.layers)
        .map(|(l, sel)| {
            let s = l.shape();
            let b = l.clone().reshape(&[1, s[0], s[1], s[2]])?;
            let g = ops::gather_channels(&b, std::slice::from_ref(&sel.indices))?;
            Ok(g.reshape(&[sel.m, s[1], s[2]])?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureStack {
        layers,
        extractor_id: stack.extractor_id.clone(),
        image_ref: stack.image_ref.clone(),
    })
}

/// Applies a selection to a batched layer `(N, c, h, w)`.
pub fn select_batch(layer: &Tensor<f32>, indices: &[usize]) -> Result<Tensor<f32>> {
    let n = layer.shape().first().copied().unwrap_or(0);
    Ok(ops::gather_channels(layer, &vec![indices.to_vec(); n])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_map_equal_to_mask_scores_zero() {
        let mask = [0.0, 1.0, 1.0, 0.0];
        assert_eq!(map_loss(&mask, &mask), 0.0);
        // A map normalized to all ones against a mask with one positive
        // pixel of four.
        assert!((map_loss(&[1.0; 4], &[1.0, 0.0, 0.0, 0.0]) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn constant_maps_normalize_to_zero() {
        let mut t = Tensor::from_fn(&[2, 2, 3, 3], |i| if i < 9 { 4.0 } else { i as f32 });
        normalize_maps(&mut t, MapNorm::MinMax);
        assert!(t.data()[..9].iter().all(|&v| v == 0.0));
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(t.data()[9], 0.0);
        assert_eq!(t.data()[17], 1.0);
        let mut single = Tensor::full(&[1, 1, 1, 1], 1.0);
        normalize_maps(&mut single, MapNorm::MinMax);
        assert_eq!(single.data(), [0.0]);
        normalize_maps(&mut Tensor::full(&[1, 1, 1, 1], 1.0), MapNorm::Max);
    }

    #[test]
    fn identical_features_with_empty_masks_score_zero() {
        let f = Tensor::from_fn(&[2, 3, 4, 4], |i| (i % 5) as f32);
        let mut acc = AfsAccumulator::new(&[3], MapNorm::MinMax);
        acc.add_batch(&[f.clone()], &[f], &Tensor::zeros(&[2, 8, 8]))
            .unwrap();
        assert_eq!(acc.losses().unwrap(), vec![vec![0.0; 3]]);
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(rank_channels(&[0.5, 0.1, 0.5, 0.1]), [1, 3, 0, 2]);
    }

    #[test]
    fn full_retention_keeps_loss_order() {
        let c = AfsIndexCache::from_losses("x", "d", vec![vec![0.3, 0.1, 0.2]], &[3]).unwrap();
        assert_eq!(c.layers[0].indices, [1, 2, 0]);
        assert!(AfsIndexCache::from_losses("x", "d", vec![vec![0.3]], &[2]).is_err());
        assert!(AfsIndexCache::from_losses("x", "d", vec![vec![0.3]], &[0]).is_err());
    }
}
