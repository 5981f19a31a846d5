use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compositor::SynthConfig;
use crate::diffusion::{DenoiserArch, DiffusionTrainConfig, SamplerKind, SigmaChoice};
use crate::error::{Error, IoContext, Result};
use crate::feature_bank::{ExtractorConfig, MapNorm};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Root holding one directory per category.
    pub dataset: PathBuf,
    pub work_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            work_dir: PathBuf::from("work"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Images are resized to `image_size x image_size`.
    pub image_size: usize,
    /// Categories to use; empty means every category found.
    pub categories: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            categories: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionStageConfig {
    pub train: DiffusionTrainConfig,
    /// Defaults to a small U-Net over RGB.
    pub arch: Option<DenoiserArch>,
    /// Overrides the global seed for this stage only.
    pub seed: Option<u64>,
}

impl Default for DiffusionStageConfig {
    fn default() -> Self {
        Self {
            train: DiffusionTrainConfig::default(),
            arch: None,
            seed: None,
        }
    }
}

impl DiffusionStageConfig {
    pub fn arch(&self) -> DenoiserArch {
        self.arch
            .clone()
            .unwrap_or_else(|| DenoiserArch::small_unet(3))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdasConfig {
    /// Number of donor images generated.
    pub count: usize,
    /// Anomaly strength is drawn uniformly from `[s_min, s_max]` per image.
    pub s_min: f64,
    pub s_max: f64,
    pub sampler: SamplerKind,
    /// Reverse steps after respacing.
    pub steps: usize,
    pub ddim_sigma: SigmaChoice,
    /// Clip the implied clean image to the valid range at every step.
    pub clip_denoised: bool,
    /// Use the images in this directory as donors instead of sampling.
    pub donor_dir: Option<PathBuf>,
}

impl Default for SdasConfig {
    fn default() -> Self {
        Self {
            count: 64,
            s_min: 0.1,
            s_max: 0.2,
            sampler: SamplerKind::Ddpm,
            steps: 50,
            ddim_sigma: SigmaChoice::Learned,
            clip_denoised: true,
            donor_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AfsConfig {
    /// Channels kept per feature layer.
    pub m: Vec<usize>,
    /// Synthetic anomalies scored.
    pub samples: usize,
    pub batch: usize,
    pub norm: MapNorm,
}

impl Default for AfsConfig {
    fn default() -> Self {
        Self {
            m: vec![16, 32, 32, 16],
            samples: 1024,
            batch: 32,
            norm: MapNorm::MinMax,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Samples per step, normal and anomalous interleaved.
    pub batch: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 8,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fpr_limit: f64,
    pub batch: usize,
    /// Write PGM score maps and PNG overlays per test image.
    pub export_maps: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fpr_limit: 0.3,
            batch: 16,
            export_maps: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads for sampling and inference; never changes results.
    pub workers: usize,
    /// Train one model on all categories pooled.
    pub multiclass: bool,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub diffusion: DiffusionStageConfig,
    pub synth: SdasConfig,
    pub blend: SynthConfig,
    pub extractor: ExtractorConfig,
    pub afs: AfsConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            multiclass: false,
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            diffusion: DiffusionStageConfig::default(),
            synth: SdasConfig::default(),
            blend: SynthConfig::default(),
            extractor: ExtractorConfig::default(),
            afs: AfsConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Sets `key` (dotted path) in `table`; the value is parsed as TOML and
/// falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{part}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        Self::from_layers(&[text], overrides)
    }

    /// Merges TOML documents in order (later keys win, tables merge
    /// recursively), applies overrides, and validates.
    pub fn from_layers(layers: &[&str], overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::new();
        for text in layers {
            let layer: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            merge(&mut table, layer);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults only when `None`) over an optional base
    /// document and applies overrides.
    pub fn load(base: Option<&str>, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) if !p.is_file() => return Err(Error::MissingPath(p.to_path_buf())),
            Some(p) => std::fs::read_to_string(p).at(p)?,
            None => String::new(),
        };
        Self::from_layers(&[base.unwrap_or(""), &text], overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.workers == 0 {
            return cfg_err("workers must be at least 1".into());
        }
        let size = self.data.image_size;
        let layers = match &self.extractor {
            ExtractorConfig::BuiltinPyramid { widths, .. } => {
                if widths.is_empty() || widths.contains(&0) {
                    return cfg_err(format!("extractor widths must be positive, got {widths:?}"));
                }
                for (k, (&w, &m)) in widths.iter().zip(&self.afs.m).enumerate() {
                    if m > w {
                        return cfg_err(format!(
                            "afs.m[{k}] = {m} exceeds the {w} channels of layer {k}"
                        ));
                    }
                }
                widths.len()
            }
            ExtractorConfig::FileIngest { layers, .. } => *layers,
        };
        if size < 8 || size % (1 << layers.min(16)) != 0 {
            return cfg_err(format!(
                "image_size {size} must be divisible by 2^{layers} for a {layers}-layer extractor"
            ));
        }
        if self.afs.m.len() != layers || self.afs.m.contains(&0) {
            return cfg_err(format!(
                "afs.m {:?} needs one positive entry per extractor layer ({layers})",
                self.afs.m
            ));
        }
        if self.afs.samples == 0 || self.afs.batch == 0 {
            return cfg_err("afs.samples and afs.batch must be positive".into());
        }
        let s = &self.synth;
        if !(0.0 <= s.s_min && s.s_min <= s.s_max && s.s_max.is_finite()) {
            return cfg_err(format!(
                "strength range [{}, {}] is invalid",
                s.s_min, s.s_max
            ));
        }
        let t = &self.diffusion.train;
        if s.steps == 0 || s.steps > t.timesteps {
            return cfg_err(format!(
                "synth.steps {} must lie in [1, {}]",
                s.steps, t.timesteps
            ));
        }
        if t.timesteps == 0 || t.batch == 0 || t.lr <= 0.0 || t.gamma < 0.0 {
            return cfg_err(
                "diffusion.train needs positive timesteps, batch, lr and gamma >= 0".into(),
            );
        }
        if let Some(c) = t.crop {
            if c == 0 || c > size || c % 4 != 0 {
                return cfg_err(format!(
                    "diffusion crop {c} must be a multiple of 4 no larger than {size}"
                ));
            }
        }
        if self.train.batch == 0 || self.train.lr <= 0.0 || self.eval.batch == 0 {
            return cfg_err("train.batch, train.lr and eval.batch must be positive".into());
        }
        if !(self.eval.fpr_limit > 0.0 && self.eval.fpr_limit <= 1.0) {
            return cfg_err(format!(
                "eval.fpr_limit must lie in (0, 1], got {}",
                self.eval.fpr_limit
            ));
        }
        if self.model.disc_hidden == 0 || self.model.recon.depth == 0 {
            return cfg_err("model.disc_hidden and model.recon.depth must be positive".into());
        }
        self.blend.validate()?;
        self.model.rrs.validate()?;
        Ok(())
    }

    /// Hex SHA-256 of everything that can influence results; paths and
    /// the worker count are excluded.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        c.workers = 1;
        digest_parts(&[&serde_json::to_vec(&c).expect("config serializes")])
    }

    pub fn diffusion_seed(&self) -> u64 {
        self.diffusion.seed.unwrap_or(self.seed)
    }
}

/// Hex SHA-256 over length-prefixed parts.
pub fn digest_parts(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = PipelineConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c, PipelineConfig::default());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = PipelineConfig::from_toml_str(
            "seed = 3\n[train]\nsteps = 10\n",
            &[
                "train.steps=20".into(),
                "model.rrs.mode=max".into(),
                "paths.work_dir=/tmp/x".into(),
                "afs.m=[8, 16, 16, 8]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.steps, 20);
        assert_eq!(c.model.rrs.mode, crate::rrs::RrsMode::Max);
        assert_eq!(c.paths.work_dir, PathBuf::from("/tmp/x"));
        assert_eq!(c.afs.m, [8, 16, 16, 8]);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for o in [
            "train.stepz=1",
            "model.rrs.p=0",
            "synth.s_min=0.5",
            "afs.m=[1, 2]",
            "data.image_size=60",
            "workers=0",
            "nonsense",
        ] {
            let r = PipelineConfig::from_toml_str("", &[o.to_string()]);
            assert!(matches!(r, Err(Error::Config(_))), "{o}: {r:?}");
        }
    }

    #[test]
    fn digest_ignores_paths_and_workers() {
        let a = PipelineConfig::from_toml_str("", &[]).unwrap();
        let b =
            PipelineConfig::from_toml_str("workers = 4\n[paths]\nwork_dir = 'elsewhere'\n", &[])
                .unwrap();
        let c = PipelineConfig::from_toml_str("seed = 1", &[]).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn layers_merge_tables() {
        let c = PipelineConfig::from_layers(
            &["[train]\nsteps = 7\nbatch = 4\n", "[train]\nbatch = 2\n"],
            &[],
        )
        .unwrap();
        assert_eq!((c.train.steps, c.train.batch), (7, 2));
    }

    #[test]
    fn toml_round_trip() {
        let a = PipelineConfig::from_toml_str("", &["synth.donor_dir='d'".into()]).unwrap();
        let b = PipelineConfig::from_toml_str(&a.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(a, b);
    }
}
