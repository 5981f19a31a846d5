//! Denoising diffusion with a learnable reverse variance, trained on a
//! hybrid objective, and a reverse sampler whose transition variance can be
//! inflated by an anomaly strength `s`.

mod denoiser;
mod loss;
mod posterior;
mod sampler;
mod schedule;
mod train;

pub use denoiser::{Denoiser, DenoiserArch, DenoiserOutput, NoisePredictor};
pub use loss::{hybrid_loss, HybridLoss};
pub use posterior::{gaussian_kl, interpolate_variance, posterior_mean_variance};
pub use sampler::{
    reverse_step, sdas_sample, to_image_space, to_model_space, SamplerConfig, SamplerKind,
    SigmaChoice,
};
pub use schedule::{even_steps, validate_steps, DiffusionSchedule, ScheduleKind};
pub use train::{train_diffusion, DiffusionTrainConfig, StepLoss};
