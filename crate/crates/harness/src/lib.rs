//! Evaluation harness: folds, cross-resolution reports, model comparison
//! and a synthetic cross-resolution dataset with known tier scores.

pub mod compare;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod folds;
pub mod synth;

pub use compare::{compare_models, Comparison, ComparisonRow};
pub use data::{load_examples, read_labels, write_labels, Example, LabelRow};
pub use eval::{ensemble, evaluate, evaluate_predictions, EvalReport, Metrics, ModelKind, Prediction};
pub use experiment::{run_crossres, CrossResConfig, CrossResRun};
pub use folds::{make_folds, FoldPlan};
pub use synth::{synth_crossres, synth_crossres_with, SynthConfig, SynthDataset};

pub type Synth32 = SynthDataset<f32>;
pub type Synth64 = SynthDataset<f64>;
pub type Example32 = Example<f32>;
pub type Example64 = Example<f64>;

use xres_core::dataset::TierName;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("folds: {0}")]
    Folds(String),
    #[error("{image_id} has no prediction at tier {tier}")]
    MissingTier { image_id: String, tier: TierName },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] xres_model::ModelError),
    #[error(transparent)]
    Store(#[from] xres_core::store::StoreError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
