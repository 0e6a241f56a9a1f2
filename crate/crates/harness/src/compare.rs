//! Ranked model comparison (joint RMSE vs joint SRCC).

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::{ensemble, EvalReport, ModelKind};
use crate::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub kind: ModelKind,
    pub joint_rmse: f64,
    /// Empty when undefined.
    pub joint_srcc: Option<f64>,
    pub joint_plcc: Option<f64>,
    /// 1 = lowest RMSE.
    pub rank_rmse: usize,
    /// 1 = highest SRCC; undefined SRCC ranks last.
    pub rank_srcc: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Ordered by `rank_rmse`.
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, model: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const ENSEMBLE_NAME: &str = "ensemble";

/// Ranks the reports. When a single-low and a single-high report are present
/// and no ensemble is, their averaging ensemble is added.
pub fn compare_models(reports: &[EvalReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(HarnessError::Input("comparison needs at least two reports".into()));
    }
    let mut rows: Vec<ComparisonRow> = reports.iter().map(row).collect();
    let low = reports.iter().find(|r| r.kind == ModelKind::SingleLow);
    let high = reports.iter().find(|r| r.kind == ModelKind::SingleHigh);
    if let (Some(a), Some(b), false) = (low, high, reports.iter().any(|r| r.kind == ModelKind::Ensemble)) {
        rows.push(row(&ensemble(ENSEMBLE_NAME, a, b)?));
    }
    let by_srcc = |a: &ComparisonRow, b: &ComparisonRow| match (a.joint_srcc, b.joint_srcc) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
    .then_with(|| a.model.cmp(&b.model));
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&i, &j| by_srcc(&rows[i], &rows[j]));
    for (rank, i) in order.into_iter().enumerate() {
        rows[i].rank_srcc = rank + 1;
    }
    rows.sort_by(|a, b| a.joint_rmse.total_cmp(&b.joint_rmse).then_with(|| a.model.cmp(&b.model)));
    for (rank, r) in rows.iter_mut().enumerate() {
        r.rank_rmse = rank + 1;
    }
    Ok(Comparison { rows })
}

fn row(r: &EvalReport) -> ComparisonRow {
    ComparisonRow {
        model: r.model.clone(),
        kind: r.kind,
        joint_rmse: r.joint.rmse,
        joint_srcc: r.joint.srcc.value().copied(),
        joint_plcc: r.joint.plcc.value().copied(),
        rank_rmse: 0,
        rank_srcc: 0,
    }
}
