//! Reliability statistics and label-shift analysis.
//!
//! Rank statistics use average ranks for ties throughout.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{participant_scores, DatasetError, MosTable, RatingEvent, TierName, SCORE_MAX, SCORE_MIN};
use crate::rng;
use crate::Scalar;

/// Sample sizes up to this use the exact signed-rank distribution.
pub const WILCOXON_EXACT_MAX_N: usize = 25;
pub const HISTOGRAM_BIN_WIDTH: f64 = 2.0;
pub const MIN_COMMON_IMAGES: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} values, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("correlation undefined for a constant vector")]
    Constant,
    #[error("{0}")]
    Degenerate(String),
    #[error("dataset: {0}")]
    Dataset(String),
}

impl From<DatasetError> for StatsError {
    fn from(e: DatasetError) -> Self {
        StatsError::Dataset(e.to_string())
    }
}

pub type Result<T, E = StatsError> = std::result::Result<T, E>;

fn check_pair<T>(x: &[T], y: &[T], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < min {
        return Err(StatsError::TooShort {
            need: min,
            got: x.len(),
        });
    }
    Ok(())
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("no NaN in ranked data"));
    let mut ranks = vec![T::zero(); x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        // positions i+1 ..= j
        let avg = T::from_usize_lossy(i + 1 + j) / T::lit(2.0);
        for &k in &idx[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

fn mean<T: Scalar>(x: &[T]) -> T {
    x.iter().copied().sum::<T>() / T::from_usize_lossy(x.len())
}

/// Pearson linear correlation.
pub fn plcc<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    check_pair(x, y, 2)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == T::zero() || syy == T::zero() {
        return Err(StatsError::Constant);
    }
    let r = sxy / (sxx * syy).sqrt();
    Ok(r.max(-T::one()).min(T::one()))
}

/// Spearman rank correlation: Pearson on average ranks.
pub fn srcc<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    check_pair(x, y, 2)?;
    plcc(&average_ranks(x), &average_ranks(y))
}

pub fn rmse<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    check_pair(x, y, 1)?;
    let s: T = x.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok((s / T::from_usize_lossy(x.len())).sqrt())
}

pub fn mae<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    check_pair(x, y, 1)?;
    let s: T = x.iter().zip(y).map(|(&a, &b)| (a - b).abs()).sum();
    Ok(s / T::from_usize_lossy(x.len()))
}

fn median<T: Scalar>(v: &[T]) -> Option<T> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    Some(if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / T::lit(2.0)
    })
}

/// Linear-interpolation quantile (type 7) of sorted data.
fn quantile_sorted<T: Scalar>(sorted: &[T], q: f64) -> T {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::lit(pos - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

// ---------------------------------------------------------------------------
// Inter-rater agreement

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterPair {
    pub a: String,
    pub b: String,
    pub common: usize,
    pub srcc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterRater {
    pub tier: TierName,
    pub pairs: Vec<RaterPair>,
    pub median: Option<f64>,
}

/// SRCC for every participant pair over their co-rated images at `tier`,
/// using repetition-averaged scores. Pairs with fewer than `min_common`
/// shared images, or with a constant score vector, are left out.
pub fn inter_rater_srcc(ratings: &[RatingEvent], tier: TierName, min_common: usize) -> Result<InterRater> {
    let by_image = participant_scores(ratings)?;
    let mut by_participant: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for ((image, t), scores) in &by_image {
        if *t != tier {
            continue;
        }
        for (p, &s) in scores {
            by_participant.entry(p.as_str()).or_default().insert(image.as_str(), s);
        }
    }
    let names: Vec<&str> = by_participant.keys().copied().collect();
    let mut pairs = Vec::new();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            let (sa, sb) = (&by_participant[a], &by_participant[b]);
            let (mut xa, mut xb) = (Vec::new(), Vec::new());
            for (img, &va) in sa {
                if let Some(&vb) = sb.get(img) {
                    xa.push(va);
                    xb.push(vb);
                }
            }
            if xa.len() < min_common.max(2) {
                continue;
            }
            if let Ok(r) = srcc(&xa, &xb) {
                pairs.push(RaterPair {
                    a: (*a).to_owned(),
                    b: (*b).to_owned(),
                    common: xa.len(),
                    srcc: r,
                });
            }
        }
    }
    let values: Vec<f64> = pairs.iter().map(|p| p.srcc).collect();
    Ok(InterRater {
        tier,
        median: median(&values),
        pairs,
    })
}

// ---------------------------------------------------------------------------
// SOS hypothesis

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SosFit<T> {
    pub a: T,
    pub ci95: (T, T),
    pub scale: (T, T),
    pub n_images: usize,
}

fn sos_coefficient<T: Scalar>(points: &[(T, T)], idx: impl Iterator<Item = usize>) -> Option<T> {
    let (lo, hi) = (T::lit(SCORE_MIN), T::lit(SCORE_MAX));
    let (mut num, mut den) = (T::zero(), T::zero());
    for i in idx {
        let (mos, var) = points[i];
        let x = (mos - lo) * (hi - mos);
        num += var * x;
        den += x * x;
    }
    (den > T::zero()).then(|| num / den)
}

/// Fits `var = a (mos - 1)(100 - mos)` by least squares through the scale
/// endpoints; `points` are `(mos, var)` per image. The 95% interval is a
/// percentile bootstrap over images, resample `b` drawing from ChaCha stream
/// `b`. The interval is widened to contain the point estimate if needed.
pub fn sos_fit<T: Scalar>(points: &[(T, T)], bootstrap_n: usize, seed: u64) -> Result<SosFit<T>> {
    if points.len() < 3 {
        return Err(StatsError::TooShort {
            need: 3,
            got: points.len(),
        });
    }
    let a = sos_coefficient(points, 0..points.len()).ok_or_else(|| {
        StatsError::Degenerate("every MOS lies on a scale endpoint".into())
    })?;
    let n = points.len();
    let mut boot: Vec<T> = (0..bootstrap_n)
        .filter_map(|b| {
            use rand::Rng;
            let mut rng = rng::stream(seed, b as u64);
            let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            sos_coefficient(points, picks.into_iter())
        })
        .collect();
    let ci95 = if boot.is_empty() {
        (a, a)
    } else {
        boot.sort_by(|x, y| x.partial_cmp(y).unwrap());
        (
            quantile_sorted(&boot, 0.025).min(a),
            quantile_sorted(&boot, 0.975).max(a),
        )
    };
    Ok(SosFit {
        a,
        ci95,
        scale: (T::lit(SCORE_MIN), T::lit(SCORE_MAX)),
        n_images: n,
    })
}

/// [`sos_fit`] over the rows of a MOS table rated by at least two participants.
pub fn sos_fit_table(table: &MosTable, tier: Option<TierName>, bootstrap_n: usize, seed: u64) -> Result<SosFit<f64>> {
    let points: Vec<(f64, f64)> = table
        .rows
        .iter()
        .filter(|r| r.n >= 2 && tier.is_none_or(|t| r.tier == t))
        .map(|r| (r.mos, r.var))
        .collect();
    sos_fit(&points, bootstrap_n, seed)
}

// ---------------------------------------------------------------------------
// ICC(1,1)

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IccResult<T> {
    pub icc: T,
    pub msb: T,
    pub msw: T,
    pub k0: T,
}

/// One-way random-effects, single-score ICC for possibly unbalanced data:
/// `groups[i]` holds the ratings of image `i`.
pub fn icc_1_1<T: Scalar>(groups: &[Vec<T>]) -> Result<IccResult<T>> {
    let groups: Vec<&Vec<T>> = groups.iter().filter(|g| !g.is_empty()).collect();
    let n = groups.len();
    if n < 2 {
        return Err(StatsError::TooShort { need: 2, got: n });
    }
    let total: usize = groups.iter().map(|g| g.len()).sum();
    let within_df: usize = groups.iter().map(|g| g.len() - 1).sum();
    if within_df == 0 {
        return Err(StatsError::Degenerate(
            "every image has a single rating; within-image variance undefined".into(),
        ));
    }
    let grand = groups.iter().flat_map(|g| g.iter().copied()).sum::<T>() / T::from_usize_lossy(total);
    let (mut ssw, mut ssb) = (T::zero(), T::zero());
    for g in &groups {
        let m = mean(g);
        ssw += g.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
        ssb += T::from_usize_lossy(g.len()) * (m - grand) * (m - grand);
    }
    let nm1 = T::from_usize_lossy(n - 1);
    let msw = ssw / T::from_usize_lossy(within_df);
    let msb = ssb / nm1;
    let sum_k = T::from_usize_lossy(total);
    let sum_k2 = groups
        .iter()
        .map(|g| T::from_usize_lossy(g.len() * g.len()))
        .sum::<T>();
    let k0 = (sum_k - sum_k2 / sum_k) / nm1;
    let denom = msb + (k0 - T::one()) * msw;
    let icc = if denom == T::zero() {
        T::zero()
    } else {
        (msb - msw) / denom
    };
    Ok(IccResult { icc, msb, msw, k0 })
}

/// ICC(1,1) at one tier from repetition-averaged participant scores.
pub fn icc_from_ratings(ratings: &[RatingEvent], tier: TierName) -> Result<IccResult<f64>> {
    let groups: Vec<Vec<f64>> = participant_scores(ratings)?
        .into_iter()
        .filter(|((_, t), _)| *t == tier)
        .map(|(_, s)| s.into_values().collect())
        .collect();
    icc_1_1(&groups)
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult<T> {
    /// `min(W+, W-)`.
    pub statistic: T,
    pub p_value: T,
    pub method: TestMethod,
    /// Pairs left after dropping zero differences.
    pub n_used: usize,
}

/// Two-sided paired Wilcoxon signed-rank test on `y - x`.
///
/// Zero differences are dropped and ties get average ranks. Up to
/// [`WILCOXON_EXACT_MAX_N`] non-zero pairs the p-value comes from the exact
/// permutation distribution of the (tied) ranks; above that, from the normal
/// approximation with tie and continuity corrections.
pub fn wilcoxon_signed_rank<T: Scalar>(x: &[T], y: &[T]) -> Result<TestResult<T>> {
    check_pair(x, y, 1)?;
    let d: Vec<T> = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| b - a)
        .filter(|v| *v != T::zero())
        .collect();
    let n = d.len();
    if n == 0 {
        return Ok(TestResult {
            statistic: T::zero(),
            p_value: T::one(),
            method: TestMethod::Exact,
            n_used: 0,
        });
    }
    let abs: Vec<T> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: T = d
        .iter()
        .zip(&ranks)
        .filter(|(v, _)| **v > T::zero())
        .map(|(_, &r)| r)
        .sum();
    let total = T::from_usize_lossy(n * (n + 1)) / T::lit(2.0);
    let w = w_plus.min(total - w_plus);

    if n <= WILCOXON_EXACT_MAX_N {
        // average ranks are multiples of 1/2, so doubled ranks are integers
        let doubled: Vec<usize> = ranks
            .iter()
            .map(|r| (r.as_f64() * 2.0).round() as usize)
            .collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0u64; max + 1];
        counts[0] = 1;
        let mut reach = 0;
        for &r in &doubled {
            for s in (0..=reach).rev() {
                if counts[s] > 0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let w2 = (w.as_f64() * 2.0).round() as usize;
        let tail: u64 = counts[..=w2].iter().sum();
        let p = (2.0 * tail as f64 / 2f64.powi(n as i32)).min(1.0);
        return Ok(TestResult {
            statistic: w,
            p_value: T::lit(p),
            method: TestMethod::Exact,
            n_used: n,
        });
    }

    let nf = n as f64;
    let mu = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted: Vec<f64> = abs.iter().map(|v| v.as_f64()).collect();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((w.as_f64() - mu + 0.5) / var.sqrt()).min(0.0);
    let p = statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2).min(1.0);
    Ok(TestResult {
        statistic: w,
        p_value: T::lit(p),
        method: TestMethod::NormalApprox,
        n_used: n,
    })
}

// ---------------------------------------------------------------------------
// Label shift

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub image_id: String,
    pub mos_a: f64,
    pub mos_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub tier: TierName,
    /// Left bin edges; bins are `[edge, edge + 2)`, the last one closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// A metric that may be undefined on the given data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell<V> {
    Value(V),
    Error { error: String },
}

impl<V> Cell<V> {
    pub fn from_result<E: std::fmt::Display>(r: std::result::Result<V, E>) -> Self {
        match r {
            Ok(v) => Cell::Value(v),
            Err(e) => Cell::Error { error: e.to_string() },
        }
    }

    pub fn value(&self) -> Option<&V> {
        match self {
            Cell::Value(v) => Some(v),
            Cell::Error { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierPairShift {
    pub a: TierName,
    pub b: TierName,
    pub n: usize,
    pub srcc: Cell<f64>,
    pub mean_shift: f64,
    pub wilcoxon: Cell<TestResult<f64>>,
    pub scatter: Vec<ScatterPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelShiftReport {
    pub pairs: Vec<TierPairShift>,
    pub histograms: Vec<Histogram>,
}

pub fn histogram(table: &MosTable, tier: TierName) -> Histogram {
    let bins = ((SCORE_MAX - SCORE_MIN) / HISTOGRAM_BIN_WIDTH).ceil() as usize;
    let mut counts = vec![0; bins];
    for r in table.for_tier(tier) {
        let b = ((r.mos - SCORE_MIN) / HISTOGRAM_BIN_WIDTH).floor().max(0.0) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    Histogram {
        tier,
        edges: (0..bins).map(|i| SCORE_MIN + i as f64 * HISTOGRAM_BIN_WIDTH).collect(),
        counts,
    }
}

/// For every pair of tiers present: SRCC, mean shift `b - a`, Wilcoxon test
/// and the scatter over images rated at both; plus per-tier histograms.
pub fn label_shift_report(table: &MosTable) -> Result<LabelShiftReport> {
    let tiers = table.tiers();
    if tiers.len() < 2 {
        return Err(StatsError::Degenerate(format!(
            "label shift needs at least two tiers, found {}",
            tiers.len()
        )));
    }
    let mut pairs = Vec::new();
    for (i, &a) in tiers.iter().enumerate() {
        for &b in &tiers[i + 1..] {
            let lookup: BTreeMap<&str, f64> = table.for_tier(b).map(|r| (r.image_id.as_str(), r.mos)).collect();
            let scatter: Vec<ScatterPoint> = table
                .for_tier(a)
                .filter_map(|r| {
                    lookup.get(r.image_id.as_str()).map(|&mb| ScatterPoint {
                        image_id: r.image_id.clone(),
                        mos_a: r.mos,
                        mos_b: mb,
                    })
                })
                .collect();
            let xa: Vec<f64> = scatter.iter().map(|p| p.mos_a).collect();
            let xb: Vec<f64> = scatter.iter().map(|p| p.mos_b).collect();
            let mean_shift = if scatter.is_empty() {
                0.0
            } else {
                xa.iter().zip(&xb).map(|(p, q)| q - p).sum::<f64>() / xa.len() as f64
            };
            pairs.push(TierPairShift {
                a,
                b,
                n: scatter.len(),
                srcc: Cell::from_result(srcc(&xa, &xb)),
                mean_shift,
                wilcoxon: Cell::from_result(wilcoxon_signed_rank(&xa, &xb)),
                scatter,
            });
        }
    }
    Ok(LabelShiftReport {
        pairs,
        histograms: tiers.iter().map(|&t| histogram(table, t)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::MosRow;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn srcc_examples() {
        assert_eq!(srcc(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(srcc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // ranks x = [1, 2.5, 2.5, 4], y = [1, 3, 2, 4]
        let r = srcc(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 4.5 / 22.5f64.sqrt()).abs() < 1e-12, "{r}");
        assert_eq!(srcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(StatsError::Constant));
        assert!(srcc(&[1.0], &[1.0]).is_err());
        assert!(srcc(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn error_metrics() {
        let x = [1.0, 5.0, 9.0];
        assert_eq!(plcc(&x, &x).unwrap(), 1.0);
        assert_eq!(rmse(&x, &x).unwrap(), 0.0);
        assert_eq!(mae(&x, &x).unwrap(), 0.0);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((plcc(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(rmse(&[0.0, 0.0], &[3.0, -3.0]).unwrap(), 3.0);
        assert_eq!(mae(&[0.0, 0.0], &[3.0, -3.0]).unwrap(), 3.0);
        assert_eq!(plcc(&[2.0, 2.0], &[1.0, 3.0]), Err(StatsError::Constant));
    }

    #[test]
    fn sos_noiseless_recovery_and_zero() {
        let pts: Vec<(f64, f64)> = (0..50)
            .map(|i| {
                let m = 2.0 + i as f64 * 1.9;
                (m, 0.05 * (m - 1.0) * (100.0 - m))
            })
            .collect();
        let fit = sos_fit(&pts, 200, 1).unwrap();
        assert!((fit.a - 0.05).abs() < 1e-12);
        assert!(fit.ci95.0 <= fit.a && fit.a <= fit.ci95.1);
        let zeros: Vec<(f64, f64)> = pts.iter().map(|&(m, _)| (m, 0.0)).collect();
        assert_eq!(sos_fit(&zeros, 10, 1).unwrap().a, 0.0);
        let ends = vec![(1.0, 0.0), (100.0, 0.0), (1.0, 0.0)];
        assert!(matches!(sos_fit(&ends, 10, 1), Err(StatsError::Degenerate(_))));
        assert!(sos_fit(&pts[..2], 10, 1).is_err());
    }

    #[test]
    fn sos_scales_linearly() {
        let mut rng = crate::rng::seeded(5);
        let pts: Vec<(f64, f64)> = (0..40)
            .map(|_| (rng.random_range(5.0..95.0), rng.random_range(0.0..300.0)))
            .collect();
        let a = sos_fit(&pts, 0, 0).unwrap().a;
        let scaled: Vec<_> = pts.iter().map(|&(m, v)| (m, 4.0 * v)).collect();
        assert_eq!(sos_fit(&scaled, 0, 0).unwrap().a, 4.0 * a);
        assert_eq!(sos_fit(&pts, 100, 9).unwrap(), sos_fit(&pts, 100, 9).unwrap());
    }

    #[test]
    fn sos_from_table_skips_single_rater_rows() {
        let row = |id: &str, mos, var, n| MosRow {
            image_id: id.into(),
            tier: TierName::S,
            mos,
            var,
            n,
        };
        let t = MosTable {
            rows: vec![
                row("a", 50.0, 0.1 * 49.0 * 50.0, 3),
                row("b", 30.0, 0.1 * 29.0 * 70.0, 3),
                row("c", 80.0, 0.1 * 79.0 * 20.0, 4),
                row("d", 50.0, 0.0, 1),
            ],
        };
        let fit = sos_fit_table(&t, None, 50, 0).unwrap();
        assert_eq!(fit.n_images, 3);
        assert!((fit.a - 0.1).abs() < 1e-12);
    }

    #[test]
    fn icc_hand_anova() {
        let r = icc_1_1::<f64>(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert!((r.msw - 0.5).abs() < 1e-12);
        assert!((r.msb - 8.0).abs() < 1e-12);
        assert!((r.k0 - 2.0).abs() < 1e-12);
        assert!((r.icc - 7.5 / 8.5).abs() < 1e-12);
        assert!((r.icc - 0.8824).abs() < 1e-4);
    }

    #[test]
    fn icc_edge_cases() {
        let perfect = icc_1_1(&[vec![10.0; 4], vec![50.0; 4], vec![90.0; 3]]).unwrap();
        assert_eq!(perfect.icc, 1.0);
        let flat = icc_1_1(&[vec![5.0, 5.0], vec![5.0, 5.0]]).unwrap();
        assert_eq!(flat.icc, 0.0);
        assert!(icc_1_1(&[vec![1.0], vec![2.0]]).is_err());
        assert!(icc_1_1(&[vec![1.0, 2.0]]).is_err());
        // unbalanced: k0 = (7 - (9 + 4 + 4)/7) / 2
        let u = icc_1_1::<f64>(&[vec![1.0, 2.0, 3.0], vec![4.0, 6.0], vec![9.0, 9.5]]).unwrap();
        assert!((u.k0 - (7.0 - 17.0 / 7.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn icc_null_panel() {
        let mut rng = crate::rng::seeded(2024);
        let groups: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..5).map(|_| rng.random_range(1.0..100.0)).collect())
            .collect();
        let r = icc_1_1(&groups).unwrap();
        assert!(r.icc.abs() < 0.08, "{}", r.icc);
    }

    #[test]
    fn wilcoxon_examples() {
        let x = [1.0, 2.0, 3.0];
        let r = wilcoxon_signed_rank(&x, &x).unwrap();
        assert_eq!((r.p_value, r.method), (1.0, TestMethod::Exact));
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 0.25);
        assert_eq!(r.method, TestMethod::Exact);
    }

    #[test]
    fn wilcoxon_large_sample_uses_normal_approximation() {
        let mut rng = crate::rng::seeded(3);
        let x: Vec<f64> = (0..210).map(|_| rng.random_range(1.0..90.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 5.0 + rng.random_range(-1.7..1.7)).collect();
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.method, TestMethod::NormalApprox);
        assert!(r.p_value < 0.005);
        // symmetric noise around zero: no evidence
        let z: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!(wilcoxon_signed_rank(&x, &z).unwrap().p_value > 0.5);
    }

    #[test]
    fn label_shift_identical_tiers() {
        let mut rows = Vec::new();
        for i in 0..20 {
            for t in TierName::ALL {
                rows.push(MosRow {
                    image_id: format!("i{i}"),
                    tier: t,
                    mos: 10.0 + 4.0 * i as f64,
                    var: 0.0,
                    n: 3,
                });
            }
        }
        let rep = label_shift_report(&MosTable { rows }).unwrap();
        assert_eq!(rep.pairs.len(), 3);
        for p in &rep.pairs {
            assert_eq!(p.srcc, Cell::Value(1.0));
            assert_eq!(p.wilcoxon.value().unwrap().p_value, 1.0);
        }
        assert_eq!(rep.histograms[0].counts.iter().sum::<usize>(), 20);
        assert_eq!(rep.histograms[0].counts.len(), 50);
    }

    #[test]
    fn label_shift_single_tier_errors() {
        let t = MosTable {
            rows: vec![MosRow {
                image_id: "a".into(),
                tier: TierName::M,
                mos: 50.0,
                var: 0.0,
                n: 1,
            }],
        };
        assert!(label_shift_report(&t).is_err());
    }

    proptest! {
        #[test]
        fn srcc_invariant_under_monotone_maps(v in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40)) {
            let x: Vec<f64> = v.iter().map(|p| p.0).collect();
            let y: Vec<f64> = v.iter().map(|p| p.1).collect();
            if let Ok(r) = srcc(&x, &y) {
                let fx: Vec<f64> = x.iter().map(|a| a.powi(3) + 2.0 * a).collect();
                let gy: Vec<f64> = y.iter().map(|b| (b / 50.0).exp()).collect();
                prop_assert!((srcc(&fx, &gy).unwrap() - r).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn plcc_invariant_under_positive_affine(v in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40), s in 0.1f64..10.0, o in -50.0f64..50.0) {
            let x: Vec<f64> = v.iter().map(|p| p.0).collect();
            let y: Vec<f64> = v.iter().map(|p| p.1).collect();
            if let Ok(r) = plcc(&x, &y) {
                let ax: Vec<f64> = x.iter().map(|a| s * a + o).collect();
                prop_assert!((plcc(&ax, &y).unwrap() - r).abs() < 1e-9);
            }
        }

        #[test]
        fn icc_invariant_under_shared_affine(seed in any::<u64>(), alpha in 0.1f64..10.0, beta in -50.0f64..50.0) {
            let mut rng = crate::rng::seeded(seed);
            let groups: Vec<Vec<f64>> = (0..12)
                .map(|_| {
                    let base = rng.random_range(1.0..100.0);
                    (0..rng.random_range(1..6)).map(|_| base + rng.random_range(-10.0..10.0)).collect()
                })
                .collect();
            if let Ok(r) = icc_1_1(&groups) {
                let t: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().map(|v| alpha * v + beta).collect()).collect();
                prop_assert!((icc_1_1(&t).unwrap().icc - r.icc).abs() < 1e-9);
            }
        }
    }
}
