//! Two-column vs single-column comparison on one dataset split.

use serde::{Deserialize, Serialize};

use xres_core::dataset::TierName;
use xres_model::{init_params, train_two_stage, ColumnRole, History, ModelConfig, Real, TrainConfig, TrainItem};

use crate::compare::{compare_models, Comparison, ENSEMBLE_NAME};
use crate::data::Example;
use crate::eval::{evaluate, EvalReport, ModelKind};
use crate::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossResConfig {
    pub n_train: usize,
    /// Taken from the training images for early stopping.
    pub n_val: usize,
    pub n_test: usize,
    pub base: (u32, u32),
    pub stages: Vec<usize>,
    pub bottleneck: usize,
    pub head: Vec<usize>,
    /// Single-column baselines each train at their own resolutions only;
    /// the two-column model trains on every tier.
    pub low_train_tiers: Vec<TierName>,
    pub high_train_tiers: Vec<TierName>,
    pub train: TrainConfig,
}

impl Default for CrossResConfig {
    fn default() -> Self {
        CrossResConfig {
            n_train: 600,
            n_val: 60,
            n_test: 150,
            base: (64, 48),
            stages: xres_model::params::DEFAULT_STAGES.to_vec(),
            bottleneck: xres_model::params::DEFAULT_BOTTLENECK,
            head: xres_model::params::DEFAULT_HEAD.to_vec(),
            low_train_tiers: vec![TierName::S],
            high_train_tiers: vec![TierName::M],
            train: TrainConfig::default(),
        }
    }
}

impl CrossResConfig {
    pub fn model(&self, kind: ModelKind) -> Result<ModelConfig> {
        let mut c = match kind {
            ModelKind::TwoColumn => ModelConfig::two_column(&self.stages, self.base),
            ModelKind::SingleLow => ModelConfig::single_column(ColumnRole::Low, &self.stages, self.base),
            ModelKind::SingleHigh => ModelConfig::single_column(ColumnRole::High, &self.stages, self.base),
            other => return Err(HarnessError::Input(format!("{other:?} is not a trainable model"))),
        };
        c.bottleneck = self.bottleneck;
        c.head = self.head.clone();
        Ok(c)
    }

    fn train_tiers(&self, kind: ModelKind) -> Option<&[TierName]> {
        match kind {
            ModelKind::SingleLow => Some(&self.low_train_tiers),
            ModelKind::SingleHigh => Some(&self.high_train_tiers),
            _ => None,
        }
    }
}

fn restrict<T: Clone>(items: &[TrainItem<T>], tiers: Option<&[TierName]>) -> Vec<TrainItem<T>> {
    items
        .iter()
        .map(|it| TrainItem {
            id: it.id.clone(),
            views: it.views.iter().filter(|v| tiers.is_none_or(|t| t.contains(&v.tier))).cloned().collect(),
        })
        .filter(|it| !it.views.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRun {
    pub report: EvalReport,
    pub history: History,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossResRun {
    pub seed: u64,
    pub models: Vec<ModelRun>,
    pub ensemble: EvalReport,
    pub comparison: Comparison,
}

impl CrossResRun {
    pub fn rmse(&self, kind: ModelKind) -> Option<f64> {
        if kind == ModelKind::Ensemble {
            return Some(self.ensemble.joint.rmse);
        }
        self.models.iter().find(|m| m.report.kind == kind).map(|m| m.report.joint.rmse)
    }

    /// The two-column model has a lower joint RMSE than each single column.
    pub fn two_column_wins(&self) -> bool {
        let r = |k| self.rmse(k).unwrap_or(f64::NAN);
        let two = r(ModelKind::TwoColumn);
        two < r(ModelKind::SingleLow) && two < r(ModelKind::SingleHigh)
    }
}

pub const MODEL_NAMES: [(ModelKind, &str); 3] =
    [(ModelKind::TwoColumn, "2c"), (ModelKind::SingleLow, "1c-low"), (ModelKind::SingleHigh, "1c-high")];

/// `examples[..n_train]` train (the last `n_val` of them validate) and the
/// following `n_test` are the test set, always at every tier. Each model starts from
/// `init_params(.., seed)` and trains with `seed`.
pub fn run_crossres<T: Real>(examples: &[Example<T>], cfg: &CrossResConfig, seed: u64) -> Result<CrossResRun> {
    if cfg.n_val >= cfg.n_train || examples.len() < cfg.n_train + cfg.n_test {
        return Err(HarnessError::Input(format!(
            "{} examples cannot hold {} train ({} val) + {} test",
            examples.len(),
            cfg.n_train,
            cfg.n_val,
            cfg.n_test
        )));
    }
    let items: Vec<TrainItem<T>> = examples[..cfg.n_train].iter().map(Example::train_item).collect();
    let (train, val) = items.split_at(cfg.n_train - cfg.n_val);
    let test = &examples[cfg.n_train..cfg.n_train + cfg.n_test];
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mut models = Vec::new();
    for (kind, name) in MODEL_NAMES {
        let p0 = init_params::<T>(&cfg.model(kind)?, seed)?;
        let tiers = cfg.train_tiers(kind);
        let (tr, va) = (restrict(train, tiers), restrict(val, tiers));
        let (p, history) = train_two_stage(&p0, &tr, &va, &tc)?;
        models.push(ModelRun {
            report: evaluate(name, &p, test, tc.parallel)?,
            history,
        });
    }
    let reports: Vec<EvalReport> = models.iter().map(|m| m.report.clone()).collect();
    let ensemble = crate::eval::ensemble(ENSEMBLE_NAME, &reports[1], &reports[2])?;
    let comparison = compare_models(&reports)?;
    Ok(CrossResRun {
        seed,
        models,
        ensemble,
        comparison,
    })
}
