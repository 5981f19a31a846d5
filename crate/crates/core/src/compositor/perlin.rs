use anomaly_tensor::{Rng, Tensor};

use crate::error::{Error, Result};

/// Gradient noise sampled on an `(h, w)` pixel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PerlinField {
    pub values: Tensor<f32>,
    pub grid_x: usize,
    pub grid_y: usize,
}

/// Quintic fade `6t^5 - 15t^4 + 10t^3`.
pub fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Derivative of [`fade`], `30t^4 - 60t^3 + 30t^2`.
pub fn fade_derivative(t: f64) -> f64 {
    30.0 * t * t * (t - 1.0) * (t - 1.0)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Classic lattice gradient noise with `grid_x` by `grid_y` cells spanning
/// the field. Lattice points fall on pixel `(k h / grid_y, l w / grid_x)`
/// and have value 0. Values are scaled by `sqrt(2)` and clamped to `[-1, 1]`.
pub fn perlin_noise(
    h: usize,
    w: usize,
    grid_x: usize,
    grid_y: usize,
    rng: &mut Rng,
) -> Result<PerlinField> {
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("empty perlin field {h}x{w}")));
    }
    if grid_x == 0 || grid_y == 0 {
        return Err(Error::Config(format!(
            "perlin grid must be >= 1, got {grid_x}x{grid_y}"
        )));
    }
    let gw = grid_x + 1;
    let grads: Vec<(f64, f64)> = (0..(grid_y + 1) * gw)
        .map(|_| {
            let a = rng.uniform() * std::f64::consts::TAU;
            (a.cos(), a.sin())
        })
        .collect();
    let dot = |gy: usize, gx: usize, dy: f64, dx: f64| {
        let (cx, cy) = grads[gy * gw + gx];
        cx * dx + cy * dy
    };
    let mut values = vec![0.0f32; h * w];
    for y in 0..h {
        let fy = (y * grid_y) as f64 / h as f64;
        let iy = fy.floor() as usize;
        let ty = fy - iy as f64;
        for x in 0..w {
            let fx = (x * grid_x) as f64 / w as f64;
            let ix = fx.floor() as usize;
            let tx = fx - ix as f64;
            let n00 = dot(iy, ix, ty, tx);
            let n01 = dot(iy, ix + 1, ty, tx - 1.0);
            let n10 = dot(iy + 1, ix, ty - 1.0, tx);
            let n11 = dot(iy + 1, ix + 1, ty - 1.0, tx - 1.0);
            let (u, v) = (fade(tx), fade(ty));
            let n = lerp(lerp(n00, n01, u), lerp(n10, n11, u), v);
            values[y * w + x] = (n * std::f64::consts::SQRT_2).clamp(-1.0, 1.0) as f32;
        }
    }
    Ok(PerlinField {
        values: Tensor::new(&[h, w], values)?,
        grid_x,
        grid_y,
    })
}

/// One of `choices`, uniformly, which is log-uniform for powers of two.
pub fn random_grid(choices: &[usize], rng: &mut Rng) -> usize {
    choices[rng.below(choices.len())]
}
