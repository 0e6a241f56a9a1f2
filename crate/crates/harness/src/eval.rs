//! Per-tier, per-source and joint evaluation.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use xres_core::analytics::{self, Cell};
use xres_core::dataset::{ImageSource, TierName, SCORE_MAX, SCORE_MIN};
use xres_model::net::forward_sample;
use xres_model::{ColumnRole, ModelConfig, ModelParams, Real};

use crate::data::Example;
use crate::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TwoColumn,
    SingleLow,
    SingleHigh,
    Ensemble,
    Other,
}

impl ModelKind {
    pub fn of(config: &ModelConfig) -> Self {
        match config.columns.as_slice() {
            [_, _] => ModelKind::TwoColumn,
            [c] if c.role == ColumnRole::Low => ModelKind::SingleLow,
            [_] => ModelKind::SingleHigh,
            _ => ModelKind::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub source: ImageSource,
    pub tier: TierName,
    pub predicted: f64,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub srcc: Cell<f64>,
    pub plcc: Cell<f64>,
    pub rmse: f64,
    pub mae: f64,
}

impl Metrics {
    pub fn of(preds: &[&Prediction]) -> Self {
        let p: Vec<f64> = preds.iter().map(|x| x.predicted).collect();
        let t: Vec<f64> = preds.iter().map(|x| x.truth).collect();
        Metrics {
            n: p.len(),
            srcc: Cell::from_result(analytics::srcc(&p, &t)),
            plcc: Cell::from_result(analytics::plcc(&p, &t)),
            rmse: analytics::rmse(&p, &t).unwrap_or(f64::NAN),
            mae: analytics::mae(&p, &t).unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierSourceMetrics {
    pub tier: TierName,
    pub source: ImageSource,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierMetrics {
    pub tier: TierName,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub kind: ModelKind,
    pub cells: Vec<TierSourceMetrics>,
    pub tiers: Vec<TierMetrics>,
    /// Over the concatenation of all tiers.
    pub joint: Metrics,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn store(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Every image must be predicted at every tier that occurs in the set, and
/// only once.
pub fn evaluate_predictions(model: &str, kind: ModelKind, predictions: Vec<Prediction>) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(HarnessError::Input("no predictions".into()));
    }
    let tiers: BTreeSet<TierName> = predictions.iter().map(|p| p.tier).collect();
    let mut per_image: BTreeMap<&str, BTreeSet<TierName>> = BTreeMap::new();
    for p in &predictions {
        if !per_image.entry(&p.image_id).or_default().insert(p.tier) {
            return Err(HarnessError::Input(format!("duplicate prediction {}/{}", p.image_id, p.tier)));
        }
    }
    for (id, have) in &per_image {
        if let Some(t) = tiers.difference(have).next() {
            return Err(HarnessError::MissingTier {
                image_id: id.to_string(),
                tier: *t,
            });
        }
    }
    let sources: BTreeSet<&str> = predictions.iter().map(|p| p.source.as_str()).collect();
    let mut cells = Vec::new();
    let mut tier_rows = Vec::new();
    for &tier in &tiers {
        let at: Vec<&Prediction> = predictions.iter().filter(|p| p.tier == tier).collect();
        for &src in &sources {
            let sel: Vec<&Prediction> = at.iter().copied().filter(|p| p.source.as_str() == src).collect();
            if !sel.is_empty() {
                cells.push(TierSourceMetrics {
                    tier,
                    source: sel[0].source,
                    metrics: Metrics::of(&sel),
                });
            }
        }
        tier_rows.push(TierMetrics {
            tier,
            metrics: Metrics::of(&at),
        });
    }
    let all: Vec<&Prediction> = predictions.iter().collect();
    Ok(EvalReport {
        model: model.to_string(),
        kind,
        cells,
        tiers: tier_rows,
        joint: Metrics::of(&all),
        predictions,
    })
}

/// Clamped predictions for every view, in example order.
pub fn predict_examples<T: Real>(p: &ModelParams<T>, examples: &[Example<T>], parallel: bool) -> Result<Vec<Prediction>> {
    let jobs: Vec<(&Example<T>, usize)> = examples.iter().flat_map(|e| (0..e.views.len()).map(move |v| (e, v))).collect();
    let one = |&(e, v): &(&Example<T>, usize)| -> Result<Prediction> {
        let view = &e.views[v];
        let raw = forward_sample(p, &view.sample([false; 2]))?.as_f64();
        Ok(Prediction {
            image_id: e.id.clone(),
            source: e.source,
            tier: view.tier,
            predicted: raw.clamp(SCORE_MIN, SCORE_MAX),
            truth: view.target.as_f64(),
        })
    };
    if parallel {
        jobs.par_iter().map(one).collect()
    } else {
        jobs.iter().map(one).collect()
    }
}

pub fn evaluate<T: Real>(name: &str, p: &ModelParams<T>, examples: &[Example<T>], parallel: bool) -> Result<EvalReport> {
    evaluate_predictions(name, ModelKind::of(&p.config), predict_examples(p, examples, parallel)?)
}

/// Averages two reports' predictions per (image, tier).
pub fn ensemble(name: &str, a: &EvalReport, b: &EvalReport) -> Result<EvalReport> {
    let lookup: BTreeMap<(&str, TierName), f64> = b
        .predictions
        .iter()
        .map(|p| ((p.image_id.as_str(), p.tier), p.predicted))
        .collect();
    if lookup.len() != a.predictions.len() {
        return Err(HarnessError::Input(format!("{} and {} cover different views", a.model, b.model)));
    }
    let preds = a
        .predictions
        .iter()
        .map(|p| {
            let q = lookup.get(&(p.image_id.as_str(), p.tier)).ok_or_else(|| {
                HarnessError::Input(format!("{} has no prediction for {}/{}", b.model, p.image_id, p.tier))
            })?;
            Ok(Prediction {
                predicted: 0.5 * (p.predicted + q),
                ..p.clone()
            })
        })
        .collect::<Result<_>>()?;
    evaluate_predictions(name, ModelKind::Ensemble, preds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(f: impl Fn(TierName, f64) -> f64) -> Vec<Prediction> {
        (0..30)
            .flat_map(|i| {
                let f = &f;
                TierName::ALL.into_iter().map(move |tier| {
                    let truth = 10.0 + 2.5 * i as f64 + tier as usize as f64;
                    Prediction {
                        image_id: format!("i{i}"),
                        source: if i % 2 == 0 { ImageSource::FlickrKoniq } else { ImageSource::Pixabay },
                        tier,
                        predicted: f(tier, truth),
                        truth,
                    }
                })
            })
            .collect()
    }

    #[test]
    fn oracle_is_perfect() {
        let r = evaluate_predictions("oracle", ModelKind::Other, preds(|_, t| t)).unwrap();
        assert_eq!(r.joint.rmse, 0.0);
        assert_eq!(r.joint.srcc, Cell::Value(1.0));
        assert_eq!(r.cells.len(), 6);
        assert!(r.cells.iter().all(|c| c.metrics.srcc == Cell::Value(1.0) && c.metrics.rmse == 0.0));
    }

    #[test]
    fn constant_model_reports_error_cells() {
        let r = evaluate_predictions("c", ModelKind::Other, preds(|_, _| 50.0)).unwrap();
        assert!(matches!(r.joint.srcc, Cell::Error { .. }));
        let json = serde_json::to_string(&r.joint).unwrap();
        assert!(json.contains("\"srcc\":{\"error\""));
        let t: Vec<f64> = r.predictions.iter().map(|p| p.truth).collect();
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        let sd = (t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64).sqrt();
        let r2 = evaluate_predictions("c", ModelKind::Other, preds(|_, _| mean)).unwrap();
        assert!((r2.joint.rmse - sd).abs() < 1e-9);
    }

    #[test]
    fn bias_at_one_tier() {
        let r = evaluate_predictions("b", ModelKind::Other, preds(|tier, t| if tier == TierName::L { t + 10.0 } else { t })).unwrap();
        assert!((r.joint.rmse - (100.0f64 / 3.0).sqrt()).abs() < 1e-9);
        assert!(*r.joint.srcc.value().unwrap() > 0.95);
        assert_eq!(r.tiers[0].metrics.rmse, 0.0);
        assert_eq!(r.tiers[2].metrics.srcc, Cell::Value(1.0));
    }

    #[test]
    fn missing_tier_is_an_error() {
        let mut p = preds(|_, t| t);
        p.remove(4);
        assert!(matches!(evaluate_predictions("m", ModelKind::Other, p), Err(HarnessError::MissingTier { .. })));
    }

    #[test]
    fn ensemble_averages() {
        let a = evaluate_predictions("a", ModelKind::SingleLow, preds(|_, t| t + 4.0)).unwrap();
        let b = evaluate_predictions("b", ModelKind::SingleHigh, preds(|_, t| t - 4.0)).unwrap();
        let e = ensemble("e", &a, &b).unwrap();
        assert!(e.joint.rmse < 1e-12);
        assert_eq!(e.kind, ModelKind::Ensemble);
    }
}
