//! File formats, run configuration and the synthetic dataset.

pub mod config;
pub mod container;
pub mod jsonl;
pub mod run_dir;
pub mod synthetic;
pub mod wav;

pub use config::RunConfig;
pub use container::{Checkpoint, DType, TensorContainer};
pub use run_dir::RunDir;
