//! Adversarial visual-attention networks over gaze-aligned video and
//! slow-sampled volumetric brain recordings.
//!
//! The library covers the full pipeline: synthetic data generation, signal
//! alignment, model construction and training, spatial attention inference,
//! and evaluation — all on a single CPU core with reproducible arithmetic.

pub mod alignment;
pub mod attention;
pub mod cli;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod nn;
pub mod relational;
pub mod synthdata;
pub mod tensorcore;

pub use error::{Error, Result};
