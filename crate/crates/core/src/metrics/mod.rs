//! Image- and pixel-level detection metrics.

mod auroc;
mod components;
mod pro;
mod report;

pub use auroc::auroc;
pub use components::{connected_components, Labeling};
pub use pro::{
    normalized_area, pro, pro_curve, ProPoint, DEFAULT_FPR_LIMIT, EXACT_THRESHOLD_LIMIT,
    QUANTILE_THRESHOLDS,
};
pub use report::{evaluate, CategoryReport, EvalReport, ScoredImage};
