//! Per-scale feature reconstruction networks mapping selected anomalous
//! features back to their normal counterparts.

use anomaly_tensor::{Bound, ParamSet, Real, Rng, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, UNet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconArch {
    /// One independent network per scale.
    #[default]
    AIndependent,
    /// One network per pair of neighboring scales; the coarser scale is
    /// upsampled and concatenated with the finer one.
    CNeighborAligned,
}

/// How the squared error of each scale is reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconLossNorm {
    /// Sum over elements, mean over samples.
    #[default]
    Sum,
    /// Mean over elements and samples.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub arch: ReconArch,
    pub depth: usize,
    /// Trunk width at full resolution; defaults to the input channel count.
    pub base: Option<usize>,
    pub loss_norm: ReconLossNorm,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            arch: ReconArch::AIndependent,
            depth: 2,
            base: None,
            loss_norm: ReconLossNorm::Sum,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Group {
    unet: UNet,
    /// Scales handled, finest first.
    scales: Vec<usize>,
    channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstructors {
    m: Vec<usize>,
    groups: Vec<Group>,
}

impl Reconstructors {
    /// Builds the networks and registers their parameters under `g<j>.*`.
    pub fn build(
        m: &[usize],
        cfg: &ReconConfig,
        params: &mut ParamSet,
        rng: &mut Rng,
    ) -> Result<Self> {
        if m.is_empty() || m.contains(&0) {
            return Err(Error::Config(format!(
                "reconstruction needs positive dims, got {m:?}"
            )));
        }
        let scale_sets: Vec<Vec<usize>> = match cfg.arch {
            ReconArch::AIndependent => (0..m.len()).map(|k| vec![k]).collect(),
            ReconArch::CNeighborAligned => (0..m.len())
                .step_by(2)
                .map(|k| (k..(k + 2).min(m.len())).collect())
                .collect(),
        };
        let mut groups = Vec::with_capacity(scale_sets.len());
        for (j, scales) in scale_sets.into_iter().enumerate() {
            let channels: usize = scales.iter().map(|&k| m[k]).sum();
            let unet = UNet {
                prefix: format!("g{j}"),
                in_channels: channels,
                base: cfg.base.unwrap_or(channels),
                depth: cfg.depth,
                cond_dim: None,
            };
            unet.init(params, rng)?;
            nn::init_head(
                params,
                rng,
                &format!("g{j}.out"),
                unet.base,
                channels,
                false,
            )?;
            groups.push(Group {
                unet,
                scales,
                channels,
            });
        }
        Ok(Self {
            m: m.to_vec(),
            groups,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.m
    }

    /// Reconstructions of per-scale inputs `(N, m_k, h_k, w_k)`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        inputs: &[Var],
    ) -> Result<Vec<Var>> {
        if inputs.len() != self.m.len() {
            return Err(Error::Data(format!(
                "{} feature scales for {} reconstructors",
                inputs.len(),
                self.m.len()
            )));
        }
        for (k, (&x, &mk)) in inputs.iter().zip(&self.m).enumerate() {
            let s = tape.shape(x);
            if s.len() != 4 || s[1] != mk {
                return Err(Error::Data(format!(
                    "scale {k}: input {s:?}, expected (N, {mk}, h, w)"
                )));
            }
        }
        let mut out = vec![None; self.m.len()];
        for g in &self.groups {
            let fine = g.scales[0];
            let (h, w) = (tape.shape(inputs[fine])[2], tape.shape(inputs[fine])[3]);
            let x = if g.scales.len() == 1 {
                inputs[fine]
            } else {
                let coarse = inputs[g.scales[1]];
                let up = tape.resize_nearest(coarse, h, w)?;
                tape.concat_channels(&[inputs[fine], up])?
            };
            let trunk = g.unet.forward(tape, p, x, None)?;
            let y = nn::head(tape, p, &format!("{}.out", g.unet.prefix), trunk)?;
            debug_assert_eq!(tape.shape(y)[1], g.channels);
            if g.scales.len() == 1 {
                out[fine] = Some(y);
            } else {
                let mf = self.m[fine];
                let yf = tape.slice_channels(y, 0, mf)?;
                let yc = tape.slice_channels(y, mf, g.channels - mf)?;
                let c = g.scales[1];
                let (hc, wc) = (tape.shape(inputs[c])[2], tape.shape(inputs[c])[3]);
                out[fine] = Some(yf);
                out[c] = Some(tape.resize_bilinear(yc, hc, wc)?);
            }
        }
        Ok(out
            .into_iter()
            .map(|v| v.expect("every scale reconstructed"))
            .collect())
    }
}

/// `sum_k ||G_k - target_k||^2 / N` (or the element mean per scale).
pub fn recon_loss<T: Real>(
    tape: &mut Tape<T>,
    outputs: &[Var],
    targets: &[Var],
    norm: ReconLossNorm,
) -> Result<Var> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(Error::Data(format!(
            "{} reconstructions for {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    let n = tape.shape(outputs[0])[0];
    let mut total: Option<Var> = None;
    for (&o, &t) in outputs.iter().zip(targets) {
        let d = tape.sub(o, t)?;
        let sq = tape.square(d)?;
        let term = match norm {
            ReconLossNorm::Sum => {
                let s = tape.sum(sq)?;
                tape.mul_scalar(s, T::from_f64_lossy(1.0 / n as f64))?
            }
            ReconLossNorm::Mean => tape.mean(sq)?,
        };
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use anomaly_tensor::{OpKind, Tensor};

    fn inputs(tape: &mut Tape<f32>, m: &[usize], rng: &mut Rng) -> Vec<Var> {
        m.iter()
            .enumerate()
            .map(|(k, &c)| {
                let s = 16 >> k;
                tape.constant(rng.standard_normal(&[2, c, s, s]))
            })
            .collect()
    }

    #[test]
    fn group_counts() {
        let m = [4, 6, 6, 4];
        for (arch, groups) in [
            (ReconArch::AIndependent, 4),
            (ReconArch::CNeighborAligned, 2),
        ] {
            let mut p = ParamSet::new();
            let cfg = ReconConfig {
                arch,
                ..ReconConfig::default()
            };
            let r = Reconstructors::build(&m, &cfg, &mut p, &mut Rng::new(0)).unwrap();
            assert_eq!(r.num_groups(), groups);
            let prefixes: std::collections::BTreeSet<&str> =
                p.names().map(|n| n.split('.').next().unwrap()).collect();
            assert_eq!(prefixes.len(), groups);
        }
    }

    #[test]
    fn single_scale_architectures_coincide() {
        let build = |arch| {
            let mut p = ParamSet::new();
            let cfg = ReconConfig {
                arch,
                ..ReconConfig::default()
            };
            let r = Reconstructors::build(&[5], &cfg, &mut p, &mut Rng::new(0)).unwrap();
            (r, p)
        };
        assert_eq!(
            build(ReconArch::AIndependent),
            build(ReconArch::CNeighborAligned)
        );
    }

    #[test]
    fn shapes_are_preserved_per_scale() {
        let m = [4, 6, 6, 4];
        for arch in [ReconArch::AIndependent, ReconArch::CNeighborAligned] {
            let mut p = ParamSet::new();
            let cfg = ReconConfig {
                arch,
                ..ReconConfig::default()
            };
            let r = Reconstructors::build(&m, &cfg, &mut p, &mut Rng::new(0)).unwrap();
            let mut tape = Tape::new();
            let b = p.bind_frozen(&mut tape);
            let xs = inputs(&mut tape, &m, &mut Rng::new(1));
            let ys = r.forward(&mut tape, &b, &xs).unwrap();
            for (x, y) in xs.iter().zip(&ys) {
                assert_eq!(tape.shape(*x), tape.shape(*y));
            }
        }
    }

    #[test]
    fn independent_arch_never_resizes_inputs() {
        let m = [4, 6, 6, 4];
        let mut p = ParamSet::new();
        let r =
            Reconstructors::build(&m, &ReconConfig::default(), &mut p, &mut Rng::new(0)).unwrap();
        let mut tape = Tape::new();
        let b = p.bind_frozen(&mut tape);
        let xs = inputs(&mut tape, &m, &mut Rng::new(1));
        r.forward(&mut tape, &b, &xs).unwrap();
        for x in xs {
            let uses = tape.consumers(x);
            assert!(!uses.is_empty());
            assert!(uses
                .iter()
                .all(|k| !matches!(k, OpKind::ResizeNearest | OpKind::ResizeBilinear)));
        }
    }

    #[test]
    fn identity_loss_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let i = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let l = recon_loss(&mut tape, &[a], &[i], ReconLossNorm::Sum).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 4.0);
        let l = recon_loss(&mut tape, &[a], &[a], ReconLossNorm::Sum).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
        let l = recon_loss(&mut tape, &[a], &[i], ReconLossNorm::Mean).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 1.0);
    }
}
