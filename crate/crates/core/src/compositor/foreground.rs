use anomaly_tensor::Tensor;

use crate::error::{Error, Result};

const BINS: usize = 256;

/// Binary foreground estimate. `degenerate` marks images with no usable
/// intensity split, for which the whole frame is declared foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct Foreground {
    pub mask: Tensor<f32>,
    pub degenerate: bool,
}

pub fn grayscale(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = match *img.shape() {
        [3, h, w] => (h, w),
        [1, h, w] => return Ok(img.clone().reshape(&[h, w])?),
        ref s => return Err(Error::Data(format!("expected (3, H, W) image, got {s:?}"))),
    };
    let d = img.data();
    let n = h * w;
    Ok(Tensor::from_fn(&[h, w], |i| {
        0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i]
    }))
}

fn bin(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * BINS as f32) as usize).min(BINS - 1)
}

/// Otsu threshold bin: pixels in bins `> k` form the upper class. `None`
/// when fewer than two bins are occupied.
pub fn otsu_bin(gray: &[f32]) -> Option<usize> {
    let mut hist = [0u64; BINS];
    for &v in gray {
        hist[bin(v)] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total = gray.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0);
    for (k, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += k as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, k);
        }
    }
    Some(best.1)
}

/// Otsu binarization of the grayscale image; of the two classes, the one
/// occupying the smaller share of border pixels is the foreground.
pub fn foreground_mask(img: &Tensor<f32>) -> Result<Foreground> {
    let gray = grayscale(img)?;
    let (h, w) = (gray.shape()[0], gray.shape()[1]);
    let k = match otsu_bin(gray.data()) {
        Some(k) => k,
        None => {
            log::warn!("foreground: image has no intensity split; using full frame");
            return Ok(Foreground {
                mask: Tensor::ones(&[h, w]),
                degenerate: true,
            });
        }
    };
    let upper: Vec<bool> = gray.data().iter().map(|&v| bin(v) > k).collect();
    let (mut border, mut border_upper) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                border += 1;
                border_upper += upper[y * w + x] as usize;
            }
        }
    }
    let upper_is_fg = 2 * border_upper <= border;
    let mask = upper
        .iter()
        .map(|&u| if u == upper_is_fg { 1.0 } else { 0.0 })
        .collect();
    Ok(Foreground {
        mask: Tensor::new(&[h, w], mask)?,
        degenerate: false,
    })
}
