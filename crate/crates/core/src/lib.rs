//! Evaluation of feature-attribution methods on single-lead ECG classifiers.
//!
//! The crate bundles a small reverse-mode engine for 1D residual networks,
//! a beat-annotated synthetic ECG generator, twelve attribution methods
//! (including a random baseline) and three metrics: a top-n localization IoU,
//! the pointing game and a MoRF/LeRF degradation score.

pub mod attribution;
pub mod engine;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;

pub use error::{Error, LoadError, Result};
pub use tensor::{Real, Tensor};
