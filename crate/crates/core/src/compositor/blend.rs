use anomaly_tensor::Tensor;

use super::perlin::PerlinField;
use crate::error::{Error, Result};

/// Binary anomaly mask and whether the noise field was degenerate.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskResult {
    pub mask: Tensor<f32>,
    pub degenerate: bool,
}

/// Min-max normalizes the field, keeps values above `threshold`, and
/// intersects with `foreground`.
pub fn make_mask(
    field: &PerlinField,
    foreground: &Tensor<f32>,
    threshold: f32,
) -> Result<MaskResult> {
    let v = &field.values;
    if v.shape() != foreground.shape() {
        return Err(Error::Data(format!(
            "field {:?} vs foreground {:?}",
            v.shape(),
            foreground.shape()
        )));
    }
    let (lo, hi) = (v.min().unwrap_or(0.0), v.max().unwrap_or(0.0));
    if !(hi - lo > 1e-12) {
        log::warn!("mask: constant noise field; emitting empty mask");
        return Ok(MaskResult {
            mask: Tensor::zeros(v.shape()),
            degenerate: true,
        });
    }
    let mask = v.zip_map(foreground, |n, f| {
        let n = (n - lo) / (hi - lo);
        if n > threshold && f > 0.0 {
            1.0
        } else {
            0.0
        }
    })?;
    Ok(MaskResult {
        mask,
        degenerate: false,
    })
}

/// `A = (1 - M) I + (1 - delta) M I + delta M P`, clamped to `[0, 1]`.
/// Images are `(C, H, W)`, the mask `(H, W)`.
pub fn blend(i: &Tensor<f32>, p: &Tensor<f32>, m: &Tensor<f32>, delta: f32) -> Result<Tensor<f32>> {
    if i.shape() != p.shape() || i.rank() != 3 || m.shape() != &i.shape()[1..] {
        return Err(Error::Data(format!(
            "blend shapes: I {:?}, P {:?}, M {:?}",
            i.shape(),
            p.shape(),
            m.shape()
        )));
    }
    let plane = m.len();
    let (id, pd, md) = (i.data(), p.data(), m.data());
    Ok(Tensor::from_fn(i.shape(), |k| {
        let (iv, pv, mv) = (id[k], pd[k], md[k % plane]);
        ((1.0 - mv) * iv + (1.0 - delta) * (mv * iv) + delta * (mv * pv)).clamp(0.0, 1.0)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use anomaly_tensor::Rng;

    fn field(values: Tensor<f32>) -> PerlinField {
        PerlinField {
            values,
            grid_x: 1,
            grid_y: 1,
        }
    }

    #[test]
    fn scalar_blend() {
        let a = blend(
            &Tensor::full(&[1, 1, 1], 0.2),
            &Tensor::full(&[1, 1, 1], 0.8),
            &Tensor::ones(&[1, 1]),
            0.5,
        )
        .unwrap();
        assert!((a.data()[0] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn blend_identities() {
        let mut rng = Rng::new(2);
        let i = Tensor::from_fn(&[3, 4, 5], |_| rng.uniform() as f32);
        let p = Tensor::from_fn(&[3, 4, 5], |_| rng.uniform() as f32);
        let m = Tensor::from_fn(&[4, 5], |k| (k % 3 == 0) as u8 as f32);
        assert_eq!(blend(&i, &p, &m, 0.0).unwrap(), i);
        assert_eq!(blend(&i, &p, &Tensor::zeros(&[4, 5]), 0.7).unwrap(), i);
        assert_eq!(blend(&i, &p, &Tensor::ones(&[4, 5]), 1.0).unwrap(), p);
        assert!(blend(&i, &p, &Tensor::ones(&[5, 4]), 1.0).is_err());
    }

    #[test]
    fn constant_field_gives_empty_mask() {
        let r = make_mask(
            &field(Tensor::full(&[3, 3], 0.2)),
            &Tensor::ones(&[3, 3]),
            0.5,
        )
        .unwrap();
        assert!(r.degenerate);
        assert!(r.mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_foreground_gives_empty_mask() {
        let f = field(Tensor::from_fn(&[4, 4], |i| i as f32));
        let r = make_mask(&f, &Tensor::zeros(&[4, 4]), 0.5).unwrap();
        assert!(r.mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn higher_threshold_never_grows_mask() {
        let f = field(Tensor::from_fn(&[6, 6], |i| ((i * 37) % 11) as f32));
        let fg = Tensor::ones(&[6, 6]);
        let mut prev = make_mask(&f, &fg, 0.0).unwrap().mask;
        for k in 1..=10 {
            let m = make_mask(&f, &fg, k as f32 / 10.0).unwrap().mask;
            assert!(m.data().iter().zip(prev.data()).all(|(a, b)| a <= b));
            prev = m;
        }
    }
}
