//! Synthetic data, training loops, rendering and image metrics.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod metrics;
pub mod select;
pub mod selftest;
pub mod train;

use thiserror::Error;

pub use config::{Mode, TrainConfig};
pub use dataset::{
    generate_capture, load_capture, load_sequence, save_capture, save_sequence, Capture, Frame,
    Motion, SceneConfig, Sequence, Split,
};
pub use eval::{
    evaluate, load_checkpoint, render_target, DensityDump, EvalReport, EvalRow, EvalSpec,
};
pub use metrics::{psnr, ssim};
pub use select::{select_frames, Criterion};
pub use train::{train, Episode, LossCurve, Progress, TrainOutcome, Trainer};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Body(#[from] crate::body::BodyError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Checkpoint(#[from] crate::autodiff::checkpoint::CheckpointError),
}
