use std::path::{Path, PathBuf};

use anomaly_tensor::init::he_normal;
use anomaly_tensor::io::{load_tensor, save_tensor};
use anomaly_tensor::{ops, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multi-scale features of one image; layer `k` is `(c_k, h_k, w_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub layers: Vec<Tensor<f32>>,
    pub extractor_id: String,
    pub image_ref: String,
}

impl FeatureStack {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Data("feature stack has no layers".into()));
        }
        let mut prev = (usize::MAX, usize::MAX);
        for (k, l) in self.layers.iter().enumerate() {
            let s = l.shape();
            if s.len() != 3 || s.contains(&0) {
                return Err(Error::Data(format!(
                    "layer {k} has shape {s:?}, expected (C, H, W)"
                )));
            }
            if s[1] > prev.0 || s[2] > prev.1 {
                return Err(Error::Data(format!(
                    "layer {k} is larger than layer {}",
                    k - 1
                )));
            }
            prev = (s[1], s[2]);
        }
        Ok(())
    }

    pub fn channels(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.shape()[0]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractorConfig {
    /// Fixed, untrained stack of stride-2 `conv3x3 + ReLU` stages.
    BuiltinPyramid {
        widths: Vec<usize>,
        seed: u64,
        /// Subtract 0.5 from pixel values before the first stage.
        center: bool,
        /// Every stage averages its input channels at the kernel center
        /// instead of using random weights.
        identity: bool,
    },
    /// Precomputed features at `<dir>/<image-relpath>.layer<k>.rntf`.
    FileIngest {
        dir: PathBuf,
        layers: usize,
        /// Expected `(c, h, w)` per layer; unchecked when empty.
        #[serde(default)]
        shapes: Vec<[usize; 3]>,
    },
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self::BuiltinPyramid {
            widths: vec![32, 64, 64, 32],
            seed: 0x5EED,
            center: true,
            identity: false,
        }
    }
}

pub struct FeatureExtractor {
    config: ExtractorConfig,
    weights: Vec<Tensor<f32>>,
    id: String,
}

impl FeatureExtractor {
    pub fn new(config: ExtractorConfig) -> Result<Self> {
        let (weights, id) = match &config {
            ExtractorConfig::BuiltinPyramid {
                widths,
                seed,
                center,
                identity,
            } => {
                if widths.is_empty() || widths.contains(&0) {
                    return Err(Error::Config(format!("invalid pyramid widths {widths:?}")));
                }
                let mut rng = Rng::new(*seed);
                let mut cin = 3;
                let mut ws = Vec::new();
                for &c in widths {
                    let w = if *identity {
                        let mut w = Tensor::zeros(&[c, cin, 3, 3]);
                        for o in 0..c {
                            for i in 0..cin {
                                let at = w.offset(&[o, i, 1, 1]);
                                w.data_mut()[at] = 1.0 / cin as f32;
                            }
                        }
                        w
                    } else {
                        he_normal(&mut rng, &[c, cin, 3, 3], cin * 9)
                    };
                    ws.push(w);
                    cin = c;
                }
                let id = format!(
                    "builtin-pyramid:w={}:seed={seed}:center={center}:identity={identity}",
                    widths
                        .iter()
                        .map(|w| w.to_string())
                        .collect::<Vec<_>>()
                        .join("-")
                );
                (ws, id)
            }
            ExtractorConfig::FileIngest { dir, layers, .. } => {
                if *layers == 0 {
                    return Err(Error::Config("file ingest needs at least one layer".into()));
                }
                (
                    Vec::new(),
                    format!("file-ingest:{}:layers={layers}", dir.display()),
                )
            }
        };
        Ok(Self {
            config,
            weights,
            id,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        match &self.config {
            ExtractorConfig::BuiltinPyramid { widths, .. } => widths.len(),
            ExtractorConfig::FileIngest { layers, .. } => *layers,
        }
    }

    /// Features of a batch `(N, 3, H, W)`; one tensor `(N, c_k, h_k, w_k)`
    /// per layer. Builtin only.
    pub fn extract_batch(&self, images: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        let center = match &self.config {
            ExtractorConfig::BuiltinPyramid { center, .. } => *center,
            ExtractorConfig::FileIngest { .. } => {
                return Err(Error::Config(
                    "batched extraction needs the builtin extractor".into(),
                ))
            }
        };
        if images.rank() != 4 || images.shape()[1] != 3 {
            return Err(Error::Data(format!(
                "expected (N, 3, H, W) images, got {:?}",
                images.shape()
            )));
        }
        let mut x = if center {
            images.map(|v| v - 0.5)
        } else {
            images.clone()
        };
        let mut out = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            x = ops::conv2d(&x, w, None, 2)?.map(|v| v.max(0.0));
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Features of one `(3, H, W)` image; `image_ref` is its dataset-relative
    /// path, which locates precomputed features for file ingestion.
    pub fn extract(&self, image: &Tensor<f32>, image_ref: &str) -> Result<FeatureStack> {
        let layers = match &self.config {
            ExtractorConfig::BuiltinPyramid { .. } => {
                let s = image.shape();
                if s.len() != 3 {
                    return Err(Error::Data(format!("expected (3, H, W) image, got {s:?}")));
                }
                let batch = image.clone().reshape(&[1, s[0], s[1], s[2]])?;
                self.extract_batch(&batch)?
                    .into_iter()
                    .map(|l| {
                        let s = l.shape()[1..].to_vec();
                        l.reshape(&s)
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()?
            }
            ExtractorConfig::FileIngest {
                dir,
                layers,
                shapes,
            } => {
                let mut out = Vec::with_capacity(*layers);
                for k in 0..*layers {
                    let path = layer_path(dir, image_ref, k);
                    if !path.is_file() {
                        return Err(Error::MissingArtifact(path));
                    }
                    let t = load_tensor(&path)?;
                    if let Some(want) = shapes.get(k) {
                        if t.shape() != want {
                            return Err(Error::Data(format!(
                                "{}: shape {:?}, expected {want:?}",
                                path.display(),
                                t.shape()
                            )));
                        }
                    }
                    out.push(t);
                }
                out
            }
        };
        let stack = FeatureStack {
            layers,
            extractor_id: self.id.clone(),
            image_ref: image_ref.to_string(),
        };
        stack.validate()?;
        Ok(stack)
    }
}

pub fn layer_path(dir: &Path, image_ref: &str, k: usize) -> PathBuf {
    dir.join(format!("{image_ref}.layer{k}.rntf"))
}

/// Writes a stack in the file-ingest layout.
pub fn save_stack(dir: &Path, stack: &FeatureStack) -> Result<()> {
    for (k, layer) in stack.layers.iter().enumerate() {
        let path = layer_path(dir, &stack.image_ref, k);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| Error::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        save_tensor(&path, layer)?;
    }
    Ok(())
}
