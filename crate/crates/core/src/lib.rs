//! Audio-driven talking-portrait radiance fields on the CPU.
//!
//! A head field built from a 3D spatial hash grid and a low-dimensional audio
//! grid, a pose-conditioned 2D torso field evaluated once per pixel,
//! occupancy-pruned volume rendering, staged training and a synthetic
//! dynamic-scene generator that serves as ground truth.

use std::path::PathBuf;

pub mod audio;
pub mod autograd;
pub mod bench;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod grid;
pub mod head;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod occupancy;
pub mod render;
pub mod torso;
pub mod train;

pub use autograd::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Image { path: PathBuf, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
