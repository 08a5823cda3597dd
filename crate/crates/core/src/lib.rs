//! Core pipeline for single-image fingerprint distortion rectification:
//! displacement-field geometry, a PCA deformation model, ridge-image
//! preprocessing, orientation fields, synthetic training data and the
//! evaluation metrics.

pub mod datagen;
pub mod error;
pub mod eval;
pub mod field;
pub mod orientation;
pub mod par;
pub mod pca;
pub mod preprocess;
pub mod raster;
pub mod synth;

pub use error::{Error, Result};
