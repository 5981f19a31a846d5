use anomaly_tensor::{Bound, ParamSet, Real, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, timestep_embedding, UNet};

/// Network predictions at one reverse step.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput<T = f32> {
    pub eps_hat: Tensor<T>,
    /// Log-variance interpolation weight: `v = 1` selects `beta_t`,
    /// `v = 0` selects `beta_tilde_t`.
    pub v: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserArch {
    /// Fully convolutional; images `(N, channels, H, W)` of any size.
    Unet {
        channels: usize,
        base: usize,
        depth: usize,
        time_dim: usize,
    },
    /// Flat vectors `(N, dim)`.
    Mlp {
        dim: usize,
        hidden: usize,
        time_dim: usize,
    },
}

impl DenoiserArch {
    pub fn small_unet(channels: usize) -> Self {
        Self::Unet {
            channels,
            base: 16,
            depth: 2,
            time_dim: 32,
        }
    }

    fn unet(&self) -> Option<UNet> {
        match *self {
            Self::Unet {
                channels,
                base,
                depth,
                time_dim,
            } => Some(UNet {
                prefix: "unet".into(),
                in_channels: channels,
                base,
                depth,
                cond_dim: Some(2 * time_dim),
            }),
            Self::Mlp { .. } => None,
        }
    }

    pub fn init(&self, rng: &mut Rng) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        match *self {
            Self::Unet {
                channels,
                base,
                time_dim,
                ..
            } => {
                nn::init_dense(&mut p, rng, "time", time_dim, 2 * time_dim, false)?;
                self.unet().expect("unet arch").init(&mut p, rng)?;
                nn::init_head(&mut p, rng, "head_eps", base, channels, true)?;
                nn::init_head(&mut p, rng, "head_v", base, channels, true)?;
            }
            Self::Mlp {
                dim,
                hidden,
                time_dim,
            } => {
                nn::init_dense(&mut p, rng, "mlp.0", dim + time_dim, hidden, false)?;
                nn::init_dense(&mut p, rng, "mlp.1", hidden, hidden, false)?;
                nn::init_dense(&mut p, rng, "head_eps", hidden, dim, true)?;
                nn::init_dense(&mut p, rng, "head_v", hidden, dim, true)?;
            }
        }
        Ok(p)
    }

    /// Records the network on `tape`; returns `(eps_hat, v)`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        t: &[usize],
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(x).to_vec();
        if shape.first() != Some(&t.len()) {
            return Err(Error::Data(format!(
                "{} timesteps for input batch {shape:?}",
                t.len()
            )));
        }
        match *self {
            Self::Unet {
                channels, time_dim, ..
            } => {
                if shape.len() != 4 || shape[1] != channels {
                    return Err(Error::Data(format!(
                        "denoiser expects (N, {channels}, H, W), got {shape:?}"
                    )));
                }
                let emb = tape.constant(timestep_embedding(t, time_dim));
                let cond = nn::dense(tape, p, "time", emb)?;
                let cond = tape.relu(cond)?;
                let trunk = self
                    .unet()
                    .expect("unet arch")
                    .forward(tape, p, x, Some(cond))?;
                let eps = nn::head(tape, p, "head_eps", trunk)?;
                let v = nn::head(tape, p, "head_v", trunk)?;
                Ok((eps, v))
            }
            Self::Mlp { dim, time_dim, .. } => {
                if shape != [t.len(), dim] {
                    return Err(Error::Data(format!(
                        "denoiser expects (N, {dim}), got {shape:?}"
                    )));
                }
                let emb = tape.constant(timestep_embedding(t, time_dim));
                let h = tape.concat_channels(&[x, emb])?;
                let h = nn::dense(tape, p, "mlp.0", h)?;
                let h = tape.relu(h)?;
                let h = nn::dense(tape, p, "mlp.1", h)?;
                let h = tape.relu(h)?;
                let eps = nn::dense(tape, p, "head_eps", h)?;
                let v = nn::dense(tape, p, "head_v", h)?;
                Ok((eps, v))
            }
        }
    }
}

/// Anything that maps `(x_t, model timestep)` to a [`DenoiserOutput`].
/// Samplers only see this seam, so frozen synthetic predictors can stand in
/// for trained networks.
pub trait NoisePredictor {
    fn predict(&self, x: &Tensor<f32>, t: usize) -> Result<DenoiserOutput>;
}

/// A trained network together with its parameters.
pub struct Denoiser<'a> {
    pub arch: &'a DenoiserArch,
    pub params: &'a ParamSet,
}

impl NoisePredictor for Denoiser<'_> {
    fn predict(&self, x: &Tensor<f32>, t: usize) -> Result<DenoiserOutput> {
        let mut tape = Tape::<f32>::new();
        let bound = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let steps = vec![t; x.shape()[0]];
        let (e, v) = self.arch.forward(&mut tape, &bound, xv, &steps)?;
        Ok(DenoiserOutput {
            eps_hat: tape.value(e).clone(),
            v: tape.value(v).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_heads_predict_zero() {
        for arch in [
            DenoiserArch::small_unet(3),
            DenoiserArch::Mlp {
                dim: 2,
                hidden: 8,
                time_dim: 4,
            },
        ] {
            let params = arch.init(&mut Rng::new(0)).unwrap();
            let shape: Vec<usize> = match arch {
                DenoiserArch::Unet { .. } => vec![2, 3, 8, 8],
                DenoiserArch::Mlp { .. } => vec![2, 2],
            };
            let x = Rng::new(1).standard_normal(&shape);
            let out = Denoiser {
                arch: &arch,
                params: &params,
            }
            .predict(&x, 5)
            .unwrap();
            assert_eq!(out.eps_hat.shape(), &shape[..]);
            assert!(out.eps_hat.data().iter().all(|&e| e == 0.0));
            assert!(out.v.data().iter().all(|&e| e == 0.0));
        }
    }

    #[test]
    fn rejects_mismatched_input() {
        let arch = DenoiserArch::Mlp {
            dim: 2,
            hidden: 8,
            time_dim: 4,
        };
        let params = arch.init(&mut Rng::new(0)).unwrap();
        let x = Tensor::zeros(&[2, 3]);
        assert!(Denoiser {
            arch: &arch,
            params: &params
        }
        .predict(&x, 1)
        .is_err());
    }
}
