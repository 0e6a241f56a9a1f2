//! On-disk pyramids: one PNG per (image, tier) plus `index.csv`
//! (`image_id,tier,width,height,file`, file relative to the index).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Catalog, TierName, TierSet};
use crate::imaging::{build_pyramid, crop_to_4_3, ImagingError, Pyramid, Raster};
use crate::Scalar;

pub const INDEX_FILE: &str = "index.csv";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{id}: {source}")]
    Imaging { id: String, source: ImagingError },
    #[error("catalog row {0} has no `path` column")]
    NoPath(String),
    #[error("duplicate index entry {0}/{1}")]
    Duplicate(String, TierName),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub image_id: String,
    pub tier: TierName,
    pub width: u32,
    pub height: u32,
    pub file: String,
}

/// File name for one tier; ids are kept readable but path-safe.
pub fn tier_file(image_id: &str, tier: TierName) -> String {
    let safe: String = image_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}_{tier}.png")
}

pub fn write_pyramid<T: Scalar>(dir: &Path, image_id: &str, p: &Pyramid<T>) -> Result<Vec<IndexEntry>> {
    fs::create_dir_all(dir)?;
    TierName::ALL
        .iter()
        .map(|&tier| {
            let r = p.get(tier);
            let file = tier_file(image_id, tier);
            r.save_png(dir.join(&file)).map_err(|source| StoreError::Imaging {
                id: image_id.to_string(),
                source,
            })?;
            Ok(IndexEntry {
                image_id: image_id.to_string(),
                tier,
                width: r.width() as u32,
                height: r.height() as u32,
                file,
            })
        })
        .collect()
}

pub fn write_index(dir: &Path, entries: &[IndexEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(INDEX_FILE))?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    let mut r = csv::Reader::from_path(dir.join(INDEX_FILE))?;
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for row in r.deserialize() {
        let e: IndexEntry = row?;
        if seen.insert((e.image_id.clone(), e.tier), ()).is_some() {
            return Err(StoreError::Duplicate(e.image_id, e.tier));
        }
        out.push(e);
    }
    Ok(out)
}

/// Crops, resamples and writes every catalog image. Source paths come from
/// the `path` column, relative to `base`.
pub fn prepare_catalog(catalog: &Catalog, base: &Path, out_dir: &Path, tiers: &TierSet) -> Result<Vec<IndexEntry>> {
    let mut entries = Vec::new();
    for rec in &catalog.records {
        let rel = rec.extra.get("path").ok_or_else(|| StoreError::NoPath(rec.id.clone()))?;
        let path: PathBuf = base.join(rel);
        let wrap = |source| StoreError::Imaging {
            id: rec.id.clone(),
            source,
        };
        let img = Raster::<f64>::load(&path).map_err(wrap)?;
        let crop = crop_to_4_3(&img).map_err(wrap)?;
        let p = build_pyramid(&crop, tiers).map_err(wrap)?;
        entries.extend(write_pyramid(out_dir, &rec.id, &p)?);
    }
    write_index(out_dir, &entries)?;
    Ok(entries)
}
