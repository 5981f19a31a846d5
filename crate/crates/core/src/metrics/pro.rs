use anomaly_tensor::Tensor;

use super::components::connected_components;
use crate::error::{Error, Result};

/// Above this many pixels the threshold set is reduced to quantiles.
pub const EXACT_THRESHOLD_LIMIT: usize = 1 << 20;
pub const QUANTILE_THRESHOLDS: usize = 200;
pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

/// One point of the overlap curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProPoint {
    pub fpr: f64,
    pub overlap: f64,
}

fn check_pairs(maps: &[Tensor<f32>], masks: &[Tensor<f32>]) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(Error::Data(format!(
            "{} score maps for {} masks",
            maps.len(),
            masks.len()
        )));
    }
    for (i, (s, m)) in maps.iter().zip(masks).enumerate() {
        if s.shape() != m.shape() || s.rank() != 2 {
            return Err(Error::Data(format!(
                "image {i}: score map {:?} vs mask {:?}",
                s.shape(),
                m.shape()
            )));
        }
        if s.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("image {i}: non-finite score")));
        }
    }
    Ok(())
}

/// The curve of mean per-region overlap against false-positive rate,
/// starting at `(0, 0)` and ordered by decreasing threshold.
pub fn pro_curve(maps: &[Tensor<f32>], masks: &[Tensor<f32>]) -> Result<Vec<ProPoint>> {
    check_pairs(maps, masks)?;
    // per pixel: score and owning region (global id + 1), 0 for negatives
    let mut scores = Vec::new();
    let mut owner = Vec::new();
    let mut sizes = Vec::new();
    for (s, m) in maps.iter().zip(masks) {
        let (h, w) = (m.shape()[0], m.shape()[1]);
        let fg: Vec<bool> = m.data().iter().map(|&v| v > 0.5).collect();
        let l = connected_components(&fg, h, w);
        let base = sizes.len() as u32;
        sizes.extend(l.sizes.iter().copied());
        for (&v, &lab) in s.data().iter().zip(&l.labels) {
            scores.push(v as f64);
            owner.push(if lab == 0 { 0 } else { base + lab });
        }
    }
    if sizes.is_empty() {
        return Err(Error::UndefinedMetric(
            "PRO needs at least one anomalous pixel".into(),
        ));
    }
    let negatives = owner.iter().filter(|&&o| o == 0).count();
    if negatives == 0 {
        return Err(Error::UndefinedMetric(
            "PRO needs at least one normal pixel".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let sorted: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    let thresholds = thresholds(&sorted);

    let regions = sizes.len() as f64;
    let mut curve = vec![ProPoint {
        fpr: 0.0,
        overlap: 0.0,
    }];
    let (mut fp, mut overlap_sum, mut next) = (0usize, 0.0f64, 0usize);
    for th in thresholds {
        while next < order.len() && sorted[next] >= th {
            match owner[order[next]] {
                0 => fp += 1,
                r => overlap_sum += 1.0 / sizes[r as usize - 1] as f64,
            }
            next += 1;
        }
        curve.push(ProPoint {
            fpr: fp as f64 / negatives as f64,
            overlap: overlap_sum / regions,
        });
    }
    Ok(curve)
}

/// Descending thresholds: every distinct score, or evenly spaced order
/// statistics when there are too many pixels.
fn thresholds(sorted_desc: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = if sorted_desc.len() <= EXACT_THRESHOLD_LIMIT {
        sorted_desc.to_vec()
    } else {
        let n = sorted_desc.len() - 1;
        (0..QUANTILE_THRESHOLDS)
            .map(|j| sorted_desc[j * n / (QUANTILE_THRESHOLDS - 1)])
            .collect()
    };
    out.dedup();
    out
}

/// Trapezoidal area under `curve` for `fpr <= limit`, interpolating the
/// crossing segment, divided by `limit`.
pub fn normalized_area(curve: &[ProPoint], limit: f64) -> Result<f64> {
    if !(limit > 0.0 && limit <= 1.0) {
        return Err(Error::Config(format!(
            "FPR limit must lie in (0, 1], got {limit}"
        )));
    }
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if a.fpr >= limit {
            break;
        }
        if b.fpr <= limit {
            area += (b.fpr - a.fpr) * (a.overlap + b.overlap) / 2.0;
        } else {
            let t = (limit - a.fpr) / (b.fpr - a.fpr);
            let y = a.overlap + t * (b.overlap - a.overlap);
            area += (limit - a.fpr) * (a.overlap + y) / 2.0;
            break;
        }
    }
    Ok(area / limit)
}

/// Normalized area under the per-region-overlap curve up to `fpr_limit`.
pub fn pro(maps: &[Tensor<f32>], masks: &[Tensor<f32>], fpr_limit: f64) -> Result<f64> {
    normalized_area(&pro_curve(maps, masks)?, fpr_limit)
}
