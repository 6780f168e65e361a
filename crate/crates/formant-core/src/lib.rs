//! Formant tracking and estimation toolkit.
//!
//! The tracker is a heatmap classifier: a shared shift-equivariant
//! convolutional encoder turns a spectrogram into a latent map of the same
//! shape, and per-formant decoder heads read probability heatmaps off that
//! map, each conditioned on the formants below it through latent masking.
//! Alongside the model live the full training recipe, a synthetic-vowel
//! corpus with exact ground truth, a classical LPC baseline, and the
//! evaluation harness.

pub mod baseline;
pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod inference;
pub mod model;
pub mod quantizer;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

// Re-exported so downstream crates share the same array types.
pub use ndarray;
