//! Convolutional building blocks shared by the denoiser and the feature
//! reconstructors.

use anomaly_tensor::init::{he_normal, scaled_normal};
use anomaly_tensor::{Bound, ParamSet, Real, Rng, Tape, Tensor, Var};

use crate::error::Result;

pub(crate) fn init_conv(
    params: &mut ParamSet,
    rng: &mut Rng,
    name: &str,
    cin: usize,
    cout: usize,
    gain: f64,
) -> Result<()> {
    let w = if gain == 0.0 {
        Tensor::zeros(&[cout, cin, 3, 3])
    } else {
        scaled_normal(rng, &[cout, cin, 3, 3], cin * 9, gain)
    };
    params.insert(format!("{name}.w"), w)?;
    params.insert(format!("{name}.b"), Tensor::zeros(&[cout]))?;
    Ok(())
}

pub(crate) fn init_dense(
    params: &mut ParamSet,
    rng: &mut Rng,
    name: &str,
    cin: usize,
    cout: usize,
    zero: bool,
) -> Result<()> {
    let w = if zero {
        Tensor::zeros(&[cout, cin])
    } else {
        he_normal(rng, &[cout, cin], cin)
    };
    params.insert(format!("{name}.w"), w)?;
    params.insert(format!("{name}.b"), Tensor::zeros(&[cout]))?;
    Ok(())
}

pub(crate) fn conv<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    name: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(tape.conv2d(x, w, Some(b), stride)?)
}

pub(crate) fn dense<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(tape.linear(x, w, Some(b))?)
}

/// Encoder-decoder with skip connections. Level `l` runs at `base * 2^l`
/// channels; every level has one pre-activation residual block on the way
/// down and one on the way up.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub prefix: String,
    pub in_channels: usize,
    pub base: usize,
    pub depth: usize,
    /// Width of the optional per-sample conditioning vector added to every
    /// residual block.
    pub cond_dim: Option<usize>,
}

impl UNet {
    fn width(&self, level: usize) -> usize {
        self.base << level
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) -> Result<()> {
        let p = &self.prefix;
        init_conv(
            params,
            rng,
            &format!("{p}.stem"),
            self.in_channels,
            self.base,
            1.0,
        )?;
        for l in 0..=self.depth {
            let c = self.width(l);
            self.init_block(params, rng, &format!("{p}.down{l}"), c)?;
            if l < self.depth {
                init_conv(
                    params,
                    rng,
                    &format!("{p}.pool{l}"),
                    c,
                    self.width(l + 1),
                    2f64.sqrt(),
                )?;
                init_conv(
                    params,
                    rng,
                    &format!("{p}.up{l}"),
                    self.width(l + 1),
                    c,
                    2f64.sqrt(),
                )?;
                init_conv(params, rng, &format!("{p}.merge{l}"), 2 * c, c, 2f64.sqrt())?;
                self.init_block(params, rng, &format!("{p}.upblock{l}"), c)?;
            }
        }
        Ok(())
    }

    fn init_block(&self, params: &mut ParamSet, rng: &mut Rng, name: &str, c: usize) -> Result<()> {
        init_conv(params, rng, &format!("{name}.conv1"), c, c, 2f64.sqrt())?;
        init_conv(params, rng, &format!("{name}.conv2"), c, c, 0.5)?;
        if let Some(d) = self.cond_dim {
            init_dense(params, rng, &format!("{name}.cond"), d, c, false)?;
        }
        Ok(())
    }

    fn block<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        name: &str,
        x: Var,
        cond: Option<Var>,
    ) -> Result<Var> {
        let h = tape.relu(x)?;
        let mut h = conv(tape, p, &format!("{name}.conv1"), h, 1)?;
        if let Some(c) = cond {
            let b = dense(tape, p, &format!("{name}.cond"), c)?;
            h = tape.add_channel_bias(h, b)?;
        }
        let h = tape.relu(h)?;
        let h = conv(tape, p, &format!("{name}.conv2"), h, 1)?;
        Ok(tape.add(x, h)?)
    }

    /// Trunk features `(N, base, H, W)` for input `(N, in_channels, H, W)`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        cond: Option<Var>,
    ) -> Result<Var> {
        let pre = &self.prefix;
        let mut h = conv(tape, p, &format!("{pre}.stem"), x, 1)?;
        let mut skips = Vec::with_capacity(self.depth);
        for l in 0..=self.depth {
            h = self.block(tape, p, &format!("{pre}.down{l}"), h, cond)?;
            if l < self.depth {
                skips.push(h);
                let a = tape.relu(h)?;
                h = conv(tape, p, &format!("{pre}.pool{l}"), a, 2)?;
            }
        }
        for l in (0..self.depth).rev() {
            let skip = skips[l];
            let (sh, sw) = (tape.shape(skip)[2], tape.shape(skip)[3]);
            let a = tape.relu(h)?;
            let up = tape.resize_nearest(a, sh, sw)?;
            let up = conv(tape, p, &format!("{pre}.up{l}"), up, 1)?;
            let cat = tape.concat_channels(&[up, skip])?;
            let m = conv(tape, p, &format!("{pre}.merge{l}"), cat, 1)?;
            h = self.block(tape, p, &format!("{pre}.upblock{l}"), m, cond)?;
        }
        Ok(h)
    }
}

/// `relu -> conv3x3` projection from trunk features to `cout` channels.
pub(crate) fn init_head(
    params: &mut ParamSet,
    rng: &mut Rng,
    name: &str,
    cin: usize,
    cout: usize,
    zero: bool,
) -> Result<()> {
    init_conv(params, rng, name, cin, cout, if zero { 0.0 } else { 1.0 })
}

pub(crate) fn head<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let a = tape.relu(x)?;
    conv(tape, p, name, a, 1)
}

/// Sinusoidal embedding of integer timesteps, `(N, dim)`.
pub fn timestep_embedding<T: Real>(steps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); steps.len() * dim];
    for (n, &t) in steps.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let a = t as f64 * freq;
            out[n * dim + i] = T::from_f64_lossy(a.cos());
            out[n * dim + half + i] = T::from_f64_lossy(a.sin());
        }
    }
    Tensor::new(&[steps.len(), dim], out).expect("embedding shape")
}
