//! Self-supervised anomaly detection: diffusion-based anomaly synthesis,
//! anomaly-aware feature selection, per-scale feature reconstruction,
//! residual channel selection and evaluation metrics.

pub mod compositor;
pub mod diffusion;
pub mod error;
pub mod feature_bank;
pub mod image_io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod reconstruction;
pub mod rrs;

pub use error::{Error, Result};
