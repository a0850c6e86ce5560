//! Open-vocabulary semantic segmentation by affinity-guided pooling of
//! dense CLIP patch features.
//!
//! A frozen CLIP ViT produces text-aligned patch features (MaskCLIP) and an
//! intermediate feature tap. Two small heads trained against a frozen
//! self-supervised teacher predict patch affinities, used to pool the dense
//! features, and an objectness map, used to reassign uncertain background
//! patches.

pub mod denoiser;
pub mod error;
pub mod eval;
pub mod features;
pub mod featurizer;
pub mod grid;
pub mod palette;
pub mod preprocess;
pub mod runtime;
pub mod synthetic;
pub mod teachers;
pub mod templates;
pub mod tensors;
pub mod training;
pub mod vit;

pub use error::{Error, Result};
pub use features::{PatchFeatureMap, SourceTag};
pub use grid::{patch_grid_for, PatchGrid};
