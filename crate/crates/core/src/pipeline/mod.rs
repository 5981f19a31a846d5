//! Configuration, datasets, the toy benchmark, and the stage runner that
//! ties synthesis, selection, training and evaluation together.

mod config;
pub mod dataset;
mod stages;
pub mod toy;

pub use config::{
    apply_override, digest_parts, AfsConfig, DataConfig, DiffusionStageConfig, EvalConfig,
    PathsConfig, PipelineConfig, SdasConfig, TrainConfig,
};
pub use stages::{
    draw_strengths, DonorRecord, Group, Pipeline, StageOutput, StepRecord, KEY_AFS, KEY_SYNTH,
    KEY_TRAIN_DATA, KEY_TRAIN_INIT, MULTICLASS_GROUP,
};
pub use toy::{generate_toy, ToySpec, TOY_CATEGORY, TOY_PRESET};
