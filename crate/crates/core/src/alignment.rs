//! Quadratic score alignment from a legacy scale onto tier-specific MOS.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{TierName, SCORE_MAX, SCORE_MIN};
use crate::rng;
use crate::Scalar;

pub const DEFAULT_HOLDOUT: usize = 70;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("need at least {need} pairs (holdout + 3), got {got}")]
    TooFewPairs { need: usize, got: usize },
    #[error("rank-deficient design: fewer than three distinct legacy values in the fitting split")]
    RankDeficient,
    #[error("non-finite pair at index {0}")]
    NonFinite(usize),
    #[error("pairs file row {row}: {message}")]
    Row { row: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadMap<T> {
    pub tier: Option<TierName>,
    pub c0: T,
    pub c1: T,
    pub c2: T,
    pub fit_n: usize,
    pub holdout_n: usize,
    pub holdout_mae_gain: T,
    pub holdout_mse_gain: T,
}

impl<T: Scalar> QuadMap<T> {
    pub fn identity(tier: Option<TierName>) -> Self {
        QuadMap {
            tier,
            c0: T::zero(),
            c1: T::one(),
            c2: T::zero(),
            fit_n: 0,
            holdout_n: 0,
            holdout_mae_gain: T::zero(),
            holdout_mse_gain: T::zero(),
        }
    }

    /// `m(s)` without clamping.
    pub fn eval_raw(&self, s: T) -> T {
        self.c0 + self.c1 * s + self.c2 * s * s
    }

    /// `m(s)` clamped to the internal score range.
    pub fn eval(&self, s: T) -> T {
        self.eval_raw(s).max(T::lit(SCORE_MIN)).min(T::lit(SCORE_MAX))
    }
}

pub fn apply_map<T: Scalar>(map: &QuadMap<T>, scores: &[T]) -> Vec<T> {
    scores.iter().map(|&s| map.eval(s)).collect()
}

/// Solves the 3x3 system `a x = b` by Gaussian elimination with partial
/// pivoting. Returns `None` when singular.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut s = b[row];
        for k in row + 1..3 {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

/// Least-squares quadratic through `(x, y)`. The design is built on the
/// standardized variable for conditioning and mapped back to raw coefficients.
fn ols_quadratic(pairs: &[(f64, f64)]) -> Result<[f64; 3], AlignError> {
    let mut distinct: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(AlignError::RankDeficient);
    }
    let n = pairs.len() as f64;
    let mu = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let sd = (pairs.iter().map(|p| (p.0 - mu).powi(2)).sum::<f64>() / n).sqrt();
    let mut ata = [[0.0; 3]; 3];
    let mut atb = [0.0; 3];
    for &(x, y) in pairs {
        let z = (x - mu) / sd;
        let row = [1.0, z, z * z];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            atb[i] += row[i] * y;
        }
    }
    let [b0, b1, b2] = solve3(ata, atb).ok_or(AlignError::RankDeficient)?;
    // b0 + b1 (x-mu)/sd + b2 (x-mu)^2/sd^2
    let c2 = b2 / (sd * sd);
    let c1 = b1 / sd - 2.0 * b2 * mu / (sd * sd);
    let c0 = b0 - b1 * mu / sd + b2 * mu * mu / (sd * sd);
    Ok([c0, c1, c2])
}

/// Seeded split into `(fit, holdout)` index sets. The split only depends on
/// `n`, `holdout` and `seed`, so maps for several tiers over the same image
/// order share one holdout set.
pub fn holdout_split(n: usize, holdout: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let hold = idx.split_off(n - holdout.min(n));
    (idx, hold)
}

fn gain(mapped: f64, identity: f64) -> f64 {
    if identity == 0.0 {
        0.0
    } else {
        1.0 - mapped / identity
    }
}

/// Fits `m(s) = c0 + c1 s + c2 s^2` from `(legacy, target)` pairs on all but a
/// seeded holdout of `holdout` pairs and reports MAE/MSE gains of the
/// (clamped) map over the identity on the holdout.
pub fn fit_quadratic<T: Scalar>(
    pairs: &[(T, T)],
    holdout: usize,
    seed: u64,
    tier: Option<TierName>,
) -> Result<QuadMap<T>, AlignError> {
    let need = holdout + 3;
    if pairs.len() < need {
        return Err(AlignError::TooFewPairs {
            need,
            got: pairs.len(),
        });
    }
    let data: Vec<(f64, f64)> = pairs.iter().map(|&(x, y)| (x.as_f64(), y.as_f64())).collect();
    if let Some(i) = data.iter().position(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(AlignError::NonFinite(i));
    }
    let (fit_idx, hold_idx) = holdout_split(data.len(), holdout, seed);
    let fit: Vec<(f64, f64)> = fit_idx.iter().map(|&i| data[i]).collect();
    let [c0, c1, c2] = ols_quadratic(&fit)?;
    let mut map = QuadMap {
        tier,
        c0: T::lit(c0),
        c1: T::lit(c1),
        c2: T::lit(c2),
        fit_n: fit.len(),
        holdout_n: hold_idx.len(),
        holdout_mae_gain: T::zero(),
        holdout_mse_gain: T::zero(),
    };
    if !hold_idx.is_empty() {
        let f64_map = QuadMap::<f64> {
            tier,
            c0,
            c1,
            c2,
            ..QuadMap::identity(tier)
        };
        let (mut mae_m, mut mae_i, mut mse_m, mut mse_i) = (0.0, 0.0, 0.0, 0.0);
        for &i in &hold_idx {
            let (x, y) = data[i];
            let em = f64_map.eval(x) - y;
            let ei = x - y;
            mae_m += em.abs();
            mae_i += ei.abs();
            mse_m += em * em;
            mse_i += ei * ei;
        }
        map.holdout_mae_gain = T::lit(gain(mae_m, mae_i));
        map.holdout_mse_gain = T::lit(gain(mse_m, mse_i));
    }
    Ok(map)
}

/// A `(legacy_mos, target_mos)` pair with an optional image id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    #[serde(default)]
    pub image_id: Option<String>,
    pub legacy_mos: f64,
    pub target_mos: f64,
}

/// Reads a pairs CSV with columns `legacy_mos,target_mos` (and optionally
/// `image_id`).
pub fn read_pairs<R: Read>(reader: R) -> Result<Vec<ScorePair>, AlignError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<ScorePair>().enumerate() {
        let p = row.map_err(|e| AlignError::Row {
            row: i + 1,
            message: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<ScorePair>, AlignError> {
    read_pairs(std::fs::File::open(path)?)
}

pub fn write_map<W: Write, T: Scalar + Serialize>(writer: W, map: &QuadMap<T>) -> Result<(), AlignError> {
    serde_json::to_writer_pretty(writer, map)?;
    Ok(())
}
