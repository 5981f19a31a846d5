//! Multi-scale feature extraction and anomaly-aware channel selection:
//! channels whose normalized anomalous-vs-normal difference best matches
//! the synthetic anomaly mask are kept, and the choice is cached on disk.

mod afs;
mod extractor;

pub use afs::{
    afs_score, afs_select_cached, apply_selection, map_loss, normalize_maps, rank_channels,
    select_batch, AfsAccumulator, AfsIndexCache, LayerSelection, MapNorm,
};
pub use extractor::{layer_path, save_stack, ExtractorConfig, FeatureExtractor, FeatureStack};
