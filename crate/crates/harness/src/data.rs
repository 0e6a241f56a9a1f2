//! Labelled image lists: `image_id,source,tier,path,mos`, one row per
//! (image, tier), paths relative to the list file.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use xres_core::dataset::{ImageSource, TierName, TierSet};
use xres_core::imaging::{lanczos_resample, Raster};
use xres_core::store;
use xres_core::Scalar;
use xres_model::{TrainItem, View};

use crate::synth::SynthDataset;
use crate::{HarnessError, Result};

/// An image with its per-tier views and ground truth.
#[derive(Debug, Clone)]
pub struct Example<T> {
    pub id: String,
    pub source: ImageSource,
    pub views: Vec<View<T>>,
}

impl<T: Clone> Example<T> {
    pub fn train_item(&self) -> TrainItem<T> {
        TrainItem {
            id: self.id.clone(),
            views: self.views.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub image_id: String,
    pub source: ImageSource,
    pub tier: TierName,
    pub path: String,
    pub mos: f64,
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize().enumerate() {
        let row: LabelRow = row?;
        if !row.mos.is_finite() {
            return Err(HarnessError::Input(format!("row {}: non-finite mos", i + 1)));
        }
        out.push(row);
    }
    Ok(out)
}

pub fn write_labels(path: impl AsRef<Path>, rows: &[LabelRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads and groups rows by image (first-appearance order). Each raster
/// must match its tier's geometry. The low-column input is the S-tier row
/// when present, otherwise the view resampled to S.
pub fn load_examples<T: Scalar>(rows: &[LabelRow], base: &Path, tiers: &TierSet) -> Result<Vec<Example<T>>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&LabelRow>> = BTreeMap::new();
    for r in rows {
        let g = groups.entry(&r.image_id).or_default();
        if g.is_empty() {
            order.push(&r.image_id);
        }
        if g.iter().any(|o| o.tier == r.tier) {
            return Err(HarnessError::Input(format!("duplicate row {}/{}", r.image_id, r.tier)));
        }
        g.push(r);
    }
    let s = tiers.get(TierName::S);
    order
        .into_iter()
        .map(|id| {
            let g = &groups[id];
            let mut rasters = Vec::with_capacity(g.len());
            for r in g {
                let img: Raster<T> = Raster::<f64>::load(base.join(&r.path))
                    .map_err(|e| HarnessError::Input(format!("{}: {e}", r.path)))?
                    .cast();
                let want = tiers.get(r.tier).geometry();
                if (img.width() as u32, img.height() as u32) != want {
                    return Err(HarnessError::Input(format!(
                        "{} is {}x{}, tier {} needs {}x{}",
                        r.path,
                        img.width(),
                        img.height(),
                        r.tier,
                        want.0,
                        want.1
                    )));
                }
                rasters.push(Arc::new(img));
            }
            let s_raster = g.iter().position(|r| r.tier == TierName::S).map(|i| rasters[i].clone());
            let views = g
                .iter()
                .zip(&rasters)
                .map(|(r, img)| {
                    let low = match &s_raster {
                        Some(s) => s.clone(),
                        None => Arc::new(
                            lanczos_resample(img, s.width as usize, s.height as usize)
                                .map_err(|e| HarnessError::Input(e.to_string()))?,
                        ),
                    };
                    Ok(View {
                        tier: r.tier,
                        low,
                        high: img.clone(),
                        target: T::lit(r.mos),
                    })
                })
                .collect::<Result<_>>()?;
            Ok(Example {
                id: id.to_string(),
                source: g[0].source,
                views,
            })
        })
        .collect()
}

/// Writes the pyramids as PNGs under `dir/pyramids` (with an index) and
/// returns label rows pointing at them, relative to `dir`.
pub fn write_synth<T: Scalar>(data: &SynthDataset<T>, dir: &Path) -> Result<Vec<LabelRow>> {
    let pyr = dir.join("pyramids");
    let mut entries = Vec::new();
    let mut rows = Vec::new();
    for im in &data.images {
        for e in store::write_pyramid(&pyr, &im.id, &im.pyramid)? {
            rows.push(LabelRow {
                image_id: im.id.clone(),
                source: ImageSource::Synthetic,
                tier: e.tier,
                path: format!("pyramids/{}", e.file),
                mos: im.mos[e.tier as usize],
            });
            entries.push(e);
        }
    }
    store::write_index(&pyr, &entries)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synth_crossres;

    #[test]
    fn synth_roundtrip_through_files() {
        let d = synth_crossres::<f64>(2, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let rows = write_synth(&d, dir.path()).unwrap();
        assert_eq!(rows.len(), 6);
        write_labels(dir.path().join("all.csv"), &rows).unwrap();
        let back = read_labels(dir.path().join("all.csv")).unwrap();
        assert_eq!(back, rows);
        let ex: Vec<Example<f32>> = load_examples(&back, dir.path(), &d.tiers).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[1].views.len(), 3);
        assert!(Arc::ptr_eq(&ex[0].views[2].low, &ex[0].views[0].high));
        let orig = &d.images[0].pyramid.l;
        let diff = orig
            .samples()
            .iter()
            .zip(ex[0].views[2].high.samples())
            .map(|(a, b)| (a - *b as f64).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 0.5 / 255.0 + 1e-6);
        let mut dup = back.clone();
        dup.push(back[0].clone());
        assert!(load_examples::<f64>(&dup, dir.path(), &d.tiers).is_err());
    }
}
