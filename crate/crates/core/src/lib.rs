//! Parts-aware audio-driven video diffusion at desk scale.

pub mod error;
pub mod nn;
pub mod par_mask;
pub mod univdm;
pub mod av_classifier;
pub mod guidance;
pub mod metrics;
pub mod io;
pub mod pipeline;
pub mod cli;

pub use error::{Error, Result};
