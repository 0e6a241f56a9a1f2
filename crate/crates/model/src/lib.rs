//! Two-column image quality predictor.
//!
//! Each column is a small strided convolution network whose per-stage
//! activations are globally averaged into multi-level features. The low
//! column always sees the image at the smallest tier, the high column sees it
//! natively, and an MLP head regresses the score. Gradients come from a
//! minimal reverse-mode tape; training is two-stage NAdam with early stopping.

pub mod checkpoint;
pub mod gemm;
pub mod net;
pub mod optim;
pub mod params;
pub mod tape;
pub mod train;

pub use checkpoint::{load, save};
pub use gemm::Real;
pub use net::{forward, forward_sample, forward_features, loss_and_gradients, mlsp_features, predict, FeatureSample, Gradients, Sample};
pub use optim::{nadam_step, NadamConfig, NadamState};
pub use params::{init_params, param_count, ColumnConfig, ColumnRole, ModelConfig, ModelParams, ParamKind, Trainable};
pub use train::{train_stage, train_two_stage, History, Stage, TrainConfig, TrainItem, View};

pub type Model64 = ModelParams<f64>;
pub type Model32 = ModelParams<f32>;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("training and validation sets must be non-empty and every item needs a view")]
    EmptySet,
    #[error("item {0} is in both training and validation sets")]
    Overlap(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
