//! Stratified, diversity-enforcing selection of study images.
//!
//! Each draw walks the attributes in a random order and narrows the candidate
//! set to one uniformly chosen level per attribute, so rare levels are picked
//! as often as common ones. Draw `d` uses ChaCha stream `d` of the seed.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::dataset::ImageRecord;
use crate::rng;
use crate::Scalar;

pub const UNKNOWN_LEVEL: &str = "unknown";
pub const ASPECT_MIN: f64 = 1.315;
pub const ASPECT_MAX: f64 = 1.785;
pub const DEFAULT_MIN_WIDTH: u32 = 2048;
pub const DEFAULT_MIN_HEIGHT: u32 = 1536;
pub const DEFAULT_BINS: usize = 10;

/// Derived attribute names added by [`with_derived_attributes`].
pub const MOS_BIN_ATTRIBUTE: &str = "mos_bin";
pub const FAVORITES_BIN_ATTRIBUTE: &str = "favorites_bin";
/// Normalized favorites are binned over [0, 1.5]; larger values land in the
/// top bin.
pub const FAVORITES_SCALE: (f64, f64) = (0.0, 1.5);

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("negative count ({0})")]
    NegativeCount(String),
    #[error("bin count must be at least 1")]
    ZeroBins,
    #[error("invalid scale [{lo}, {hi}]")]
    InvalidScale { lo: f64, hi: f64 },
    #[error("requested {requested} images from a pool of {available}")]
    PoolTooSmall { requested: usize, available: usize },
    #[error("candidate pool is empty")]
    EmptyPool,
}

/// `ln(F + e) / ln(V + e)` for favorites `F` and views `V`.
pub fn normalized_favorites<T: Scalar>(favorites: T, views: T) -> Result<T, SamplerError> {
    if favorites < T::zero() || views < T::zero() {
        return Err(SamplerError::NegativeCount(format!(
            "favorites={favorites}, views={views}"
        )));
    }
    let e = T::lit(std::f64::consts::E);
    Ok((favorites + e).ln() / (views + e).ln())
}

/// Equal-length bins over the declared scale `[lo, hi]`:
/// `floor(k (s - lo) / (hi - lo))` clamped to `0..k`.
pub fn quantize_equal_bins<T: Scalar>(
    scores: &[T],
    k: usize,
    lo: T,
    hi: T,
) -> Result<Vec<usize>, SamplerError> {
    if k == 0 {
        return Err(SamplerError::ZeroBins);
    }
    if !(hi > lo) {
        return Err(SamplerError::InvalidScale {
            lo: lo.as_f64(),
            hi: hi.as_f64(),
        });
    }
    let kf = T::from_usize_lossy(k);
    Ok(scores
        .iter()
        .map(|&s| {
            let b = (kf * (s - lo) / (hi - lo)).floor();
            if b <= T::zero() {
                0
            } else {
                b.to_usize().unwrap_or(k - 1).min(k - 1)
            }
        })
        .collect())
}

/// Size and aspect-ratio admissibility of a candidate.
pub fn admissible(record: &ImageRecord, min_w: u32, min_h: u32) -> bool {
    if record.native_height == 0 {
        return false;
    }
    let ratio = f64::from(record.native_width) / f64::from(record.native_height);
    record.native_width >= min_w
        && record.native_height >= min_h
        && (ASPECT_MIN..=ASPECT_MAX).contains(&ratio)
}

/// Adds `mos_bin` (legacy MOS, `k` bins over the internal scale) and
/// `favorites_bin` (normalized favorites, `k` bins over [`FAVORITES_SCALE`])
/// attributes. Records without a legacy MOS or without views get no entry and
/// therefore fall into the `unknown` level.
pub fn with_derived_attributes(records: &[ImageRecord], k: usize) -> Result<Vec<ImageRecord>, SamplerError> {
    let mut out = records.to_vec();
    for r in &mut out {
        if let Some(mos) = r.legacy_mos_internal() {
            let b = quantize_equal_bins(&[mos], k, 1.0, 100.0)?[0];
            r.attributes.insert(MOS_BIN_ATTRIBUTE.into(), b.to_string());
        }
        if r.views > 0 {
            let nf = normalized_favorites(r.favorites as f64, r.views as f64)?;
            let b = quantize_equal_bins(&[nf], k, FAVORITES_SCALE.0, FAVORITES_SCALE.1)?[0];
            r.attributes.insert(FAVORITES_BIN_ATTRIBUTE.into(), b.to_string());
        }
    }
    Ok(out)
}

/// Attribute names and the levels observed for each in a pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSpace {
    pub attributes: Vec<String>,
    pub levels: BTreeMap<String, BTreeSet<String>>,
}

impl AttributeSpace {
    /// Space over the given attribute names; images lacking an attribute get
    /// the level `unknown`.
    pub fn from_pool(pool: &[ImageRecord], attributes: &[String]) -> Self {
        let mut levels: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for a in attributes {
            let set = levels.entry(a.clone()).or_default();
            for r in pool {
                set.insert(Self::level_of(r, a).to_owned());
            }
        }
        Self {
            attributes: attributes.to_vec(),
            levels,
        }
    }

    /// Space over every attribute any pool image carries.
    pub fn infer(pool: &[ImageRecord]) -> Self {
        let names: BTreeSet<String> = pool
            .iter()
            .flat_map(|r| r.attributes.keys().cloned())
            .collect();
        Self::from_pool(pool, &names.into_iter().collect::<Vec<_>>())
    }

    pub fn level_of<'r>(record: &'r ImageRecord, attribute: &str) -> &'r str {
        record
            .attributes
            .get(attribute)
            .map(String::as_str)
            .unwrap_or(UNKNOWN_LEVEL)
    }
}

/// Draws `n` distinct images. Per draw: shuffle the attribute order; for each
/// attribute pick a uniformly random level among those present in the
/// current subset and keep only matching images; then pick one survivor
/// uniformly and remove it from the pool.
pub fn stratified_sample(
    pool: &[ImageRecord],
    space: &AttributeSpace,
    n: usize,
    seed: u64,
) -> Result<Vec<String>, SamplerError> {
    if pool.is_empty() {
        return Err(SamplerError::EmptyPool);
    }
    if n > pool.len() {
        return Err(SamplerError::PoolTooSmall {
            requested: n,
            available: pool.len(),
        });
    }
    // level codes follow the sorted level order, so choices are independent of
    // pool order within a level
    let codes: Vec<Vec<u32>> = pool
        .iter()
        .map(|r| {
            space
                .attributes
                .iter()
                .map(|a| {
                    let level = AttributeSpace::level_of(r, a);
                    space
                        .levels
                        .get(a)
                        .and_then(|set| set.iter().position(|l| l == level))
                        .unwrap_or(usize::MAX) as u32
                })
                .collect()
        })
        .collect();

    let mut alive: Vec<usize> = (0..pool.len()).collect();
    let mut chosen = Vec::with_capacity(n);
    let mut order: Vec<usize> = (0..space.attributes.len()).collect();
    for draw in 0..n {
        if alive.is_empty() {
            return Err(SamplerError::EmptyPool);
        }
        let mut rng = rng::stream(seed, draw as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut subset = alive.clone();
        for &a in &order {
            let present: BTreeSet<u32> = subset.iter().map(|&i| codes[i][a]).collect();
            let pick = *present
                .iter()
                .nth(rng.random_range(0..present.len()))
                .expect("subset is never empty");
            subset.retain(|&i| codes[i][a] == pick);
        }
        let winner = subset[rng.random_range(0..subset.len())];
        let pos = alive.iter().position(|&i| i == winner).expect("alive");
        alive.remove(pos);
        chosen.push(pool[winner].id.clone());
    }
    Ok(chosen)
}
