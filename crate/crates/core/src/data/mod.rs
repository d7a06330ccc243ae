//! Dataset scanning, standardization, augmentation and fold planning.

pub mod augment;
pub mod dataset;
pub mod folds;
pub mod image;
pub mod manifest;
pub mod stats;
pub mod synth;

pub use augment::{augment, AugmentParams, AugmentationPolicy};
pub use dataset::{sample_rng, ImageSet, Pipeline, PipelineMode};
pub use folds::{kfold_split, kfold_split_stratified, FoldPlan};
pub use image::{resize_and_crop, CropMode, RawImage};
pub use manifest::{load_manifest, DatasetManifest, Sample, SkippedFile};
pub use stats::{compute_stats, destandardize, standardize, Split, StandardizationStats};
pub use synth::synthetic_shapes;
