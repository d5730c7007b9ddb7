use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the tracker library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: ({x0}, {y0}, {x1}, {y1})")]
    InvalidBox { x0: f64, y0: f64, x1: f64, y1: f64 },

    #[error("point ({x}, {y}) is not strictly inside the box")]
    NotPositiveSample { x: f64, y: f64 },

    #[error("regression vector has a nonpositive component")]
    InvalidRegression,

    #[error("no grid location falls inside the ground-truth box")]
    ZeroPositives,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("sequence error in {path}: {detail}")]
    Sequence { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
