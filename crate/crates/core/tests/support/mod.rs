//! Independent reference implementations used by the integration tests.
//! Each one is written the slow, obvious way and shares no code with the
//! library beyond plain data types.

#![allow(dead_code)]

use anomaly_recon::diffusion::{DenoiserOutput, NoisePredictor};
use anomaly_recon::Result;
use anomaly_tensor::Tensor;

/// AUROC as the fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut good = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                good += 1.0;
            } else if si == sj {
                good += 0.5;
            }
        }
    }
    good / pairs
}

/// 8-connected regions by repeated label propagation until nothing changes.
pub fn regions(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut label: Vec<usize> = (0..h * w).collect();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if !mask[p] {
                    continue;
                }
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let q = ny as usize * w + nx as usize;
                        if mask[q] && label[q] < label[p] {
                            label[p] = label[q];
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for p in 0..h * w {
        if mask[p] {
            groups.entry(label[p]).or_default().push(p);
        }
    }
    groups.into_values().collect()
}

/// Normalized PRO area by sweeping every distinct score as a threshold,
/// recounting false positives and region overlaps from scratch each time.
pub fn pro_sweep(maps: &[Vec<f64>], masks: &[Vec<bool>], h: usize, w: usize, limit: f64) -> f64 {
    let mut all_regions = Vec::new();
    let mut negatives = 0usize;
    for (i, m) in masks.iter().enumerate() {
        for r in regions(m, h, w) {
            all_regions.push((i, r));
        }
        negatives += m.iter().filter(|&&b| !b).count();
    }
    let mut thresholds: Vec<f64> = maps.iter().flatten().copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    let mut curve = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let mut fp = 0usize;
        for (map, mask) in maps.iter().zip(masks) {
            fp += map.iter().zip(mask).filter(|(&s, &m)| !m && s >= t).count();
        }
        let overlap: f64 = all_regions
            .iter()
            .map(|(i, r)| r.iter().filter(|&&p| maps[*i][p] >= t).count() as f64 / r.len() as f64)
            .sum::<f64>()
            / all_regions.len() as f64;
        curve.push((fp as f64 / negatives as f64, overlap));
    }

    let mut area = 0.0;
    for pair in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
        }
    }
    area / limit
}

/// Indices of the `k` largest values: channel `i` precedes `j` when it is
/// larger, or equal with a lower index. Computed by counting, not sorting.
pub fn topk_by_rank(stat: &[f64], k: usize) -> Vec<usize> {
    let rank = |i: usize| {
        (0..stat.len())
            .filter(|&j| stat[j] > stat[i] || (stat[j] == stat[i] && j < i))
            .count()
    };
    let mut by_rank = vec![usize::MAX; stat.len()];
    for i in 0..stat.len() {
        by_rank[rank(i)] = i;
    }
    by_rank.truncate(k);
    by_rank
}

/// Half-pixel bilinear resampling of one plane.
pub fn bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let taps = |d: usize, n_in: usize, n_out: usize| {
        let s = ((d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let (y0, y1, fy) = taps(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = taps(x, w, ow);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[y * ow + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Mean over triplets of `mean((minmax(resize((A - I)^2)) - M)^2)` for
/// every channel of one layer. `a` and `i` are `(N, c, h, w)`, masks
/// `(N, H, W)`.
pub fn afs_losses(a: &Tensor<f32>, i: &Tensor<f32>, masks: &Tensor<f32>) -> Vec<f64> {
    let (n, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let (mh, mw) = (masks.shape()[1], masks.shape()[2]);
    let mut out = vec![0.0; c];
    for s in 0..n {
        let mask = &masks.data()[s * mh * mw..(s + 1) * mh * mw];
        for ch in 0..c {
            let off = (s * c + ch) * h * w;
            let sq: Vec<f64> = (0..h * w)
                .map(|p| {
                    let d = a.data()[off + p] as f64 - i.data()[off + p] as f64;
                    d * d
                })
                .collect();
            let up = bilinear(&sq, h, w, mh, mw);
            let lo = up.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let norm: Vec<f64> = if hi - lo > 1e-12 {
                up.iter().map(|v| (v - lo) / (hi - lo)).collect()
            } else {
                vec![0.0; up.len()]
            };
            let loss: f64 = norm
                .iter()
                .zip(mask)
                .map(|(v, &m)| (v - m as f64).powi(2))
                .sum::<f64>()
                / norm.len() as f64;
            out[ch] += loss / n as f64;
        }
    }
    out
}

/// Indices of the `k` smallest losses, ties to the lower index.
pub fn bottomk_by_rank(loss: &[f64], k: usize) -> Vec<usize> {
    let neg: Vec<f64> = loss.iter().map(|v| -v).collect();
    topk_by_rank(&neg, k)
}

/// A frozen predictor with smooth, input-dependent outputs.
pub struct Synthetic;

impl NoisePredictor for Synthetic {
    fn predict(&self, x: &Tensor<f32>, t: usize) -> Result<DenoiserOutput> {
        Ok(DenoiserOutput {
            eps_hat: x.map(|v| (0.7 * v + 0.01 * t as f32).tanh()),
            v: x.map(|v| 0.5 + 0.4 * v.sin()),
        })
    }
}

/// A predictor that ignores its input and returns fixed values.
pub struct Constant {
    pub eps: f32,
    pub v: f32,
}

impl NoisePredictor for Constant {
    fn predict(&self, x: &Tensor<f32>, _t: usize) -> Result<DenoiserOutput> {
        Ok(DenoiserOutput {
            eps_hat: Tensor::full(x.shape(), self.eps),
            v: Tensor::full(x.shape(), self.v),
        })
    }
}
