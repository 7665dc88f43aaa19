//! Complexity measurements and sample-quality evaluation.

pub mod alloc;
mod drift;
mod features;
mod frechet;
mod plot;
mod scaling;

pub use alloc::CountingAlloc;
pub use drift::{compare_drift, DriftReport};
pub use features::{
    quality_over_time, train_feature_extractor, window_labels, window_starts, FeatureConfig, FeatureExtractor,
    FeatureTrainConfig, QualityCurve, ACCURACY_TARGET,
};
pub use frechet::frechet_feature_distance;
pub use plot::{plot_loglog, Series};
pub use scaling::{loglog_slope, measure_scaling, ScalingRecord, ScalingReport, Slopes};
