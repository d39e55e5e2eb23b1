//! Prediction difference analysis for black-box image classifiers.
//!
//! Image regions are corrupted with replacements drawn from a conditional
//! Gaussian patch model (or a discrete sampler), the classifier output is
//! marginalized over those replacements, and the shift in the target class
//! is converted to a per-pixel Weight of Evidence map.

pub mod classifier;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod heatmap;
pub mod imaging;
pub mod patch_stats;
pub mod rng;

pub use error::{Error, Result};
