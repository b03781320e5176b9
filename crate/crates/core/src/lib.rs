//! Calibration-aware semi-supervised learning with difficulty-targeted
//! mixup between labeled and pseudo-labeled samples.
//!
//! Modules go bottom-up: [`numerics`] and [`model`] are the arithmetic,
//! [`margins`] tracks per-sample training dynamics, [`mixup`] builds the
//! difficulty-aware mixed batch, [`trainer`] runs the training loop, and
//! [`calibration`] measures the result.

mod codec;

pub mod augment;
pub mod calibration;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod margins;
pub mod mixup;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
