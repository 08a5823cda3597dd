//! Dense distortion-field regression: a fully convolutional network with a
//! texture branch and an optional orientation branch, its loss stack, and
//! the training loop.

pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod layers;
pub mod losses;
pub mod model;
pub mod rectify;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
