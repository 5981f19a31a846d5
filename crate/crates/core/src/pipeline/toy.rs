//! Procedural striped texture benchmark with square and scratch defects
//! and exact ground-truth masks.

use std::f64::consts::PI;
use std::path::Path;

use anomaly_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, Result};
use crate::image_io;

pub const TOY_CATEGORY: &str = "stripes";

/// Configuration layer for the toy benchmark; user settings go on top.
pub const TOY_PRESET: &str = r#"
[data]
image_size = 64

[blend]
use_foreground = false

[afs]
m = [16, 32, 32, 16]
samples = 512

[synth]
count = 48
s_min = 0.1
s_max = 0.2
steps = 40

[train]
steps = 500
batch = 8
"#;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub size: usize,
    pub train: usize,
    pub test_good: usize,
    pub test_square: usize,
    pub test_scratch: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            size: 64,
            train: 200,
            test_good: 50,
            test_square: 25,
            test_scratch: 25,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Defect {
    Square,
    Scratch,
}

const DARK: [f64; 3] = [0.22, 0.30, 0.55];
const LIGHT: [f64; 3] = [0.85, 0.78, 0.50];
const PERIOD: f64 = 8.0;
const ANGLE: f64 = PI / 5.0;

/// A defect-free texture: diagonal sinusoidal stripes with a random phase,
/// a few soft brightness blobs, and pixel noise.
pub fn normal_texture(size: usize, rng: &mut Rng) -> Tensor<f32> {
    let phase = rng.uniform() * 2.0 * PI;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.uniform() * size as f64,
                rng.uniform() * size as f64,
                rng.uniform_range(6.0, 14.0),
                rng.uniform_range(-0.08, 0.08),
            )
        })
        .collect();
    let (ca, sa) = (ANGLE.cos(), ANGLE.sin());
    let mut img = Tensor::zeros(&[3, size, size]);
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let t = 0.5 + 0.5 * ((xf * ca + yf * sa) * 2.0 * PI / PERIOD + phase).sin();
            let glow: f64 = blobs
                .iter()
                .map(|&(bx, by, r, a)| {
                    a * (-((xf - bx).powi(2) + (yf - by).powi(2)) / (2.0 * r * r)).exp()
                })
                .sum();
            for c in 0..3 {
                let v = DARK[c] + (LIGHT[c] - DARK[c]) * t + glow + 0.02 * rng.normal();
                img.data_mut()[c * plane + y * size + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// Paints a defect into `img` and returns its exact mask `(size, size)`.
pub fn inject_defect(img: &mut Tensor<f32>, defect: Defect, rng: &mut Rng) -> Tensor<f32> {
    let size = img.shape()[1];
    let plane = size * size;
    let mut mask = Tensor::zeros(&[size, size]);
    match defect {
        Defect::Square => {
            let side = 6 + rng.below(7);
            let y0 = rng.below(size - side + 1);
            let x0 = rng.below(size - side + 1);
            let color: Vec<f32> = (0..3).map(|_| rng.uniform_range(0.1, 0.9) as f32).collect();
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    mask.data_mut()[y * size + x] = 1.0;
                    for (c, &v) in color.iter().enumerate() {
                        img.data_mut()[c * plane + y * size + x] = v;
                    }
                }
            }
        }
        Defect::Scratch => {
            let len = rng.uniform_range(size as f64 / 4.0, size as f64 / 2.0);
            let theta = rng.uniform() * PI;
            let (dx, dy) = (theta.cos() * len / 2.0, theta.sin() * len / 2.0);
            let margin = len / 2.0 + 2.0;
            let cx = rng.uniform_range(margin, size as f64 - margin);
            let cy = rng.uniform_range(margin, size as f64 - margin);
            let (ax, ay, bx, by) = (cx - dx, cy - dy, cx + dx, cy + dy);
            let value = if rng.uniform() < 0.5 { 0.05 } else { 0.95 };
            for y in 0..size {
                for x in 0..size {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let (vx, vy) = (bx - ax, by - ay);
                    let t =
                        (((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
                    let d = ((px - ax - t * vx).powi(2) + (py - ay - t * vy).powi(2)).sqrt();
                    if d <= 1.0 {
                        mask.data_mut()[y * size + x] = 1.0;
                        for c in 0..3 {
                            img.data_mut()[c * plane + y * size + x] = value;
                        }
                    }
                }
            }
        }
    }
    mask
}

/// Writes the benchmark under `root/<TOY_CATEGORY>` in the dataset layout.
pub fn generate_toy(root: &Path, spec: &ToySpec) -> Result<()> {
    let cat = root.join(TOY_CATEGORY);
    let rng = Rng::new(spec.seed);
    let dirs = [
        "train/good",
        "test/good",
        "test/square",
        "test/scratch",
        "ground_truth/square",
        "ground_truth/scratch",
    ];
    for d in dirs {
        let p = cat.join(d);
        std::fs::create_dir_all(&p).at(&p)?;
    }
    let mut counter = 0u64;
    let mut next = || {
        counter += 1;
        rng.split(counter)
    };
    for i in 0..spec.train {
        let img = normal_texture(spec.size, &mut next());
        image_io::save_rgb(&cat.join(format!("train/good/{i:03}.png")), &img)?;
    }
    for i in 0..spec.test_good {
        let img = normal_texture(spec.size, &mut next());
        image_io::save_rgb(&cat.join(format!("test/good/{i:03}.png")), &img)?;
    }
    for (name, defect, n) in [
        ("square", Defect::Square, spec.test_square),
        ("scratch", Defect::Scratch, spec.test_scratch),
    ] {
        for i in 0..n {
            let mut rng = next();
            let mut img = normal_texture(spec.size, &mut rng);
            let mask = inject_defect(&mut img, defect, &mut rng);
            image_io::save_rgb(&cat.join(format!("test/{name}/{i:03}.png")), &img)?;
            image_io::save_mask(
                &cat.join(format!("ground_truth/{name}/{i:03}_mask.png")),
                &mask,
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defects_match_their_masks() {
        for defect in [Defect::Square, Defect::Scratch] {
            for seed in 0..20 {
                let mut rng = Rng::new(seed);
                let clean = normal_texture(64, &mut rng);
                let mut img = clean.clone();
                let mask = inject_defect(&mut img, defect, &mut rng);
                let area = mask.sum();
                assert!(area >= 16.0, "{defect:?} area {area}");
                for p in 0..64 * 64 {
                    if mask.data()[p] == 0.0 {
                        for c in 0..3 {
                            assert_eq!(img.data()[c * 4096 + p], clean.data()[c * 4096 + p]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = ToySpec {
            size: 16,
            train: 2,
            test_good: 1,
            test_square: 1,
            test_scratch: 1,
            seed: 3,
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_toy(a.path(), &spec).unwrap();
        generate_toy(b.path(), &spec).unwrap();
        for rel in [
            "train/good/001.png",
            "test/scratch/000.png",
            "ground_truth/square/000_mask.png",
        ] {
            let p = |d: &Path| std::fs::read(d.join(TOY_CATEGORY).join(rel)).unwrap();
            assert_eq!(p(a.path()), p(b.path()));
        }
    }
}
