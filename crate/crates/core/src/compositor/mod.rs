//! Local-anomaly synthesis: Perlin-noise masks restricted to the object
//! foreground, and opacity blending of donor images into normal images.

mod blend;
mod foreground;
mod perlin;
mod synth;

pub use blend::{blend, make_mask, MaskResult};
pub use foreground::{foreground_mask, grayscale, otsu_bin, Foreground};
pub use perlin::{fade, fade_derivative, perlin_noise, random_grid, PerlinField};
pub use synth::{
    is_anomalous_slot, list_pngs, load_donors, resize_image, synthesize, AnomalySample,
    SynthConfig, SynthStream,
};
