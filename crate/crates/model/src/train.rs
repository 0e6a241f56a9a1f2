//! Two-stage training with early stopping.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use xres_core::dataset::TierName;
use xres_core::imaging::Raster;
use xres_core::rng::{self, StudyRng};

use crate::gemm::Real;
use crate::net::{forward_features, forward_sample, head_loss_and_gradients, loss_and_gradients, mlsp_features, FeatureSample, Sample};
use crate::optim::{nadam_step, NadamConfig, NadamState};
use crate::params::{ColumnRole, ModelParams, Trainable};
use crate::tape::{conv_out, Tape};
use crate::{ModelError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub max_epochs: usize,
    /// Overrides `max_epochs` for stage 2; 0 skips stage 2.
    pub stage2_max_epochs: Option<usize>,
    pub patience: usize,
    pub clipnorm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub flip_augment: bool,
    pub seed: u64,
    pub batch_size: usize,
    /// Momentum of the running statistics during the calibration pass.
    pub norm_momentum: f64,
    /// Calibrate normalization statistics on the training images before stage 1.
    pub calibrate_norm: bool,
    /// Set the output affine to the training-target mean and std.
    pub standardize_targets: bool,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_lr: 1e-3,
            stage2_lr: 1e-4,
            max_epochs: 40,
            stage2_max_epochs: None,
            patience: 10,
            clipnorm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            flip_augment: true,
            seed: 0,
            batch_size: 16,
            norm_momentum: 0.99,
            calibrate_norm: true,
            standardize_targets: true,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Config(m.into()));
        if self.patience > self.max_epochs {
            return fail("patience exceeds max_epochs");
        }
        if !(self.clipnorm > 0.0) {
            return fail("clipnorm must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.norm_momentum) {
            return fail("norm_momentum must be in [0, 1)");
        }
        Ok(())
    }

    fn nadam(&self, lr: f64) -> NadamConfig {
        NadamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clipnorm: self.clipnorm,
        }
    }
}

/// One tier version of an image: the low-column input (the image resized to
/// the smallest tier), the native raster and the tier's target score.
#[derive(Debug, Clone)]
pub struct View<T> {
    pub tier: TierName,
    pub low: Arc<Raster<T>>,
    pub high: Arc<Raster<T>>,
    pub target: T,
}

impl<T: Copy> View<T> {
    pub fn sample(&self, flip: [bool; 2]) -> Sample<'_, T> {
        Sample {
            low: &self.low,
            high: &self.high,
            target: self.target,
            flip,
        }
    }
}

/// An image with one or more tier views. Each epoch uses one view per item,
/// drawn uniformly.
#[derive(Debug, Clone)]
pub struct TrainItem<T> {
    pub id: String,
    pub views: Vec<View<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageHistory {
    /// Validation MSE before the first epoch.
    pub initial_val_mse: f64,
    pub epochs: Vec<EpochRecord>,
    /// 0 when no epoch improved on the starting weights.
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub stage1: StageHistory,
    pub stage2: Option<StageHistory>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Frozen columns; bottlenecks and head train on cached features.
    One,
    /// Everything but the normalization layers.
    Two,
}

impl Stage {
    fn mask(self) -> Trainable {
        match self {
            Stage::One => Trainable::Stage1,
            Stage::Two => Trainable::Stage2,
        }
    }

    fn tag(self) -> u64 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

fn check_sets<T>(train: &[TrainItem<T>], val: &[TrainItem<T>]) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(ModelError::EmptySet);
    }
    if train.iter().chain(val).any(|i| i.views.is_empty()) {
        return Err(ModelError::EmptySet);
    }
    let ids: BTreeSet<&str> = train.iter().map(|i| i.id.as_str()).collect();
    if let Some(dup) = val.iter().find(|i| ids.contains(i.id.as_str())) {
        return Err(ModelError::Overlap(dup.id.clone()));
    }
    Ok(())
}

/// (item, view, flips) in presentation order for one epoch.
fn plan_epoch<T>(items: &[TrainItem<T>], augment: bool, rng: &mut StudyRng) -> Vec<(usize, usize, [bool; 2])> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .map(|i| {
            let v = rng.random_range(0..items[i].views.len());
            let flip = if augment {
                [rng.random_bool(0.5), rng.random_bool(0.5)]
            } else {
                [false; 2]
            };
            (i, v, flip)
        })
        .collect()
}

fn ordered_sum<T: Real>(values: Vec<T>) -> f64 {
    values.into_iter().fold(0.0, |a, v| a + v.as_f64())
}

/// Mean squared error of raw predictions over every view of `items`.
pub fn evaluate_mse<T: Real>(p: &ModelParams<T>, items: &[TrainItem<T>], parallel: bool) -> Result<f64> {
    let views: Vec<&View<T>> = items.iter().flat_map(|i| &i.views).collect();
    let err = |v: &&View<T>| -> Result<T> {
        let e = forward_sample(p, &v.sample([false; 2]))? - v.target;
        Ok(e * e)
    };
    let sq: Vec<T> = if parallel {
        views.par_iter().map(err).collect::<Result<_>>()?
    } else {
        views.iter().map(err).collect::<Result<_>>()?
    };
    Ok(ordered_sum(sq) / views.len() as f64)
}

/// Sets the running statistics of every normalization stage from the
/// training images, one column at a time, stage by stage within each batch:
/// the first batch initializes the statistics, later batches update them
/// with momentum `cfg.norm_momentum`.
pub fn calibrate_norm<T: Real>(p: &mut ModelParams<T>, items: &[TrainItem<T>], cfg: &TrainConfig) -> usize {
    let layout = p.layout();
    let momentum = T::lit(cfg.norm_momentum);
    let eps = T::lit(p.config.norm_eps);
    let mut seen = 0;
    for c in 0..p.config.columns.len() {
        let role = p.config.columns[c].role;
        let mut images: Vec<&Raster<T>> = Vec::new();
        let mut ptrs = BTreeSet::new();
        for v in items.iter().flat_map(|i| &i.views) {
            let img = match role {
                ColumnRole::Low => &v.low,
                ColumnRole::High => &v.high,
            };
            if ptrs.insert(Arc::as_ptr(img) as usize) {
                images.push(img);
            }
        }
        seen += images.len();
        let idx = &layout.columns[c];
        for (bi, batch) in images.chunks(cfg.batch_size).enumerate() {
            let mut acts: Vec<(Vec<T>, [usize; 3])> = batch
                .iter()
                .map(|img| (img.to_planar(), [img.channels(), img.height(), img.width()]))
                .collect();
            for s in 0..idx.conv_w.len() {
                let ch = p.params[idx.conv_w[s]].shape[0];
                let mut pre = Vec::with_capacity(acts.len());
                for (x, shape) in &acts {
                    let mut t = Tape::new();
                    let xv = t.leaf(x.clone(), shape.to_vec(), false);
                    let w = t.leaf(p.params[idx.conv_w[s]].data.clone(), p.params[idx.conv_w[s]].shape.clone(), false);
                    let b = t.leaf(p.params[idx.conv_b[s]].data.clone(), vec![ch], false);
                    let z = t.conv(xv, w, b);
                    pre.push((t.value(z).to_vec(), [ch, conv_out(shape[1]), conv_out(shape[2])]));
                }
                let mut mean = vec![T::zero(); ch];
                let mut var = vec![T::zero(); ch];
                let mut count = 0usize;
                for (z, [_, h, w]) in &pre {
                    let hw = h * w;
                    count += hw;
                    for k in 0..ch {
                        mean[k] += z[k * hw..(k + 1) * hw].iter().copied().sum::<T>();
                    }
                }
                let n = T::from_usize_lossy(count);
                mean.iter_mut().for_each(|m| *m /= n);
                for (z, [_, h, w]) in &pre {
                    let hw = h * w;
                    for k in 0..ch {
                        var[k] += z[k * hw..(k + 1) * hw].iter().map(|&v| (v - mean[k]) * (v - mean[k])).sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= n);
                let st = &mut p.stats[c][s];
                if bi == 0 {
                    st.mean = mean;
                    st.var = var;
                } else {
                    for k in 0..ch {
                        st.mean[k] = momentum * st.mean[k] + (T::one() - momentum) * mean[k];
                        st.var[k] = momentum * st.var[k] + (T::one() - momentum) * var[k];
                    }
                }
                let st = p.stats[c][s].clone();
                acts = pre
                    .into_iter()
                    .map(|(z, shape)| {
                        let mut t = Tape::new();
                        let zv = t.leaf(z, shape.to_vec(), false);
                        let g = t.leaf(p.params[idx.gamma[s]].data.clone(), vec![ch], false);
                        let b = t.leaf(p.params[idx.beta[s]].data.clone(), vec![ch], false);
                        let nv = t.norm(zv, g, b, &st.mean, &st.var, eps);
                        let y = t.swish(nv);
                        (t.value(y).to_vec(), shape)
                    })
                    .collect();
            }
        }
    }
    seen
}

/// Output affine from the mean and (population) std of all training targets.
pub fn standardize_output<T: Real>(p: &mut ModelParams<T>, items: &[TrainItem<T>]) {
    let t: Vec<f64> = items.iter().flat_map(|i| &i.views).map(|v| v.target.as_f64()).collect();
    let n = t.len() as f64;
    let mean = t.iter().sum::<f64>() / n;
    let sd = (t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    p.output_offset = T::lit(mean);
    p.output_scale = T::lit(if sd > 0.0 { sd } else { 1.0 });
}

type EpochFn<'a, T> = dyn FnMut(&mut ModelParams<T>, &mut NadamState<T>, &mut StudyRng) -> Result<f64> + 'a;
type ValFn<'a, T> = dyn FnMut(&ModelParams<T>) -> Result<f64> + 'a;

fn run_epochs<T: Real>(
    p: &mut ModelParams<T>,
    cfg: &TrainConfig,
    stage: Stage,
    max_epochs: usize,
    epoch: &mut EpochFn<T>,
    val: &mut ValFn<T>,
) -> Result<StageHistory> {
    let mut state = NadamState::new(p);
    let initial = val(p)?;
    let mut hist = StageHistory {
        initial_val_mse: initial,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_mse: initial,
        stopped_early: false,
    };
    let mut best = p.clone();
    let stage_seed = rng::derive_seed(cfg.seed, stage.tag());
    for e in 1..=max_epochs {
        let mut r = rng::stream(stage_seed, e as u64);
        let train_mse = epoch(p, &mut state, &mut r)?;
        let val_mse = val(p)?;
        hist.epochs.push(EpochRecord {
            epoch: e,
            train_mse,
            val_mse,
        });
        if val_mse < hist.best_val_mse {
            hist.best_val_mse = val_mse;
            hist.best_epoch = e;
            best.clone_from(p);
        } else if e - hist.best_epoch >= cfg.patience {
            hist.stopped_early = e < max_epochs;
            break;
        }
    }
    *p = best;
    Ok(hist)
}

/// Runs one stage with early stopping and restores the best-validation
/// weights (which may be the starting weights).
pub fn train_stage<T: Real>(
    p: &mut ModelParams<T>,
    train: &[TrainItem<T>],
    val: &[TrainItem<T>],
    cfg: &TrainConfig,
    stage: Stage,
) -> Result<StageHistory> {
    cfg.validate()?;
    check_sets(train, val)?;
    let n_cols = p.config.columns.len();
    let mask = stage.mask();
    match stage {
        Stage::One => {
            let cache = FeatureCache::build(p, train, cfg.flip_augment, cfg.parallel)?;
            let val_cache = FeatureCache::build(p, val, false, cfg.parallel)?;
            let nadam = cfg.nadam(cfg.stage1_lr);
            let mut epoch = |p: &mut ModelParams<T>, st: &mut NadamState<T>, r: &mut StudyRng| -> Result<f64> {
                let plan = plan_epoch(train, cfg.flip_augment, r);
                let mut sse = 0.0;
                for chunk in plan.chunks(cfg.batch_size) {
                    let batch: Vec<FeatureSample<T>> = chunk
                        .iter()
                        .map(|&(i, v, flip)| cache.sample(i, v, flip, n_cols, train[i].views[v].target))
                        .collect();
                    let (loss, g) = head_loss_and_gradients(p, &batch, mask, cfg.parallel)?;
                    sse += loss.as_f64() * chunk.len() as f64;
                    nadam_step(p, g, st, &nadam, mask);
                }
                Ok(sse / plan.len() as f64)
            };
            let mut val_fn = |p: &ModelParams<T>| -> Result<f64> { Ok(val_cache.mse(p, val, n_cols, cfg.parallel)) };
            run_epochs(p, cfg, stage, cfg.max_epochs, &mut epoch, &mut val_fn)
        }
        Stage::Two => {
            let nadam = cfg.nadam(cfg.stage2_lr);
            let mut epoch = |p: &mut ModelParams<T>, st: &mut NadamState<T>, r: &mut StudyRng| -> Result<f64> {
                let plan = plan_epoch(train, cfg.flip_augment, r);
                let mut sse = 0.0;
                for chunk in plan.chunks(cfg.batch_size) {
                    let batch: Vec<Sample<T>> = chunk.iter().map(|&(i, v, flip)| train[i].views[v].sample(flip)).collect();
                    let (loss, g) = loss_and_gradients(p, &batch, mask, cfg.parallel)?;
                    sse += loss.as_f64() * chunk.len() as f64;
                    nadam_step(p, g, st, &nadam, mask);
                }
                Ok(sse / plan.len() as f64)
            };
            let mut val_fn = |p: &ModelParams<T>| evaluate_mse(p, val, cfg.parallel);
            let max = cfg.stage2_max_epochs.unwrap_or(cfg.max_epochs);
            run_epochs(p, cfg, stage, max, &mut epoch, &mut val_fn)
        }
    }
}

/// Normalization calibration, target standardization, then stage 1 (frozen
/// columns) and stage 2 (joint fine-tuning with frozen normalization).
pub fn train_two_stage<T: Real>(
    params: &ModelParams<T>,
    train: &[TrainItem<T>],
    val: &[TrainItem<T>],
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, History)> {
    cfg.validate()?;
    check_sets(train, val)?;
    let mut p = params.clone();
    if cfg.calibrate_norm {
        calibrate_norm(&mut p, train, cfg);
    }
    if cfg.standardize_targets {
        standardize_output(&mut p, train);
    }
    let stage1 = train_stage(&mut p, train, val, cfg, Stage::One)?;
    let stage2 = if cfg.stage2_max_epochs == Some(0) {
        None
    } else {
        Some(train_stage(&mut p, train, val, cfg, Stage::Two)?)
    };
    Ok((p, History { stage1, stage2 }))
}

/// Column features of every (item, view, flip) under frozen columns.
struct FeatureCache<T> {
    /// `feats[item][view][column][flip]`.
    feats: Vec<Vec<Vec<[Vec<T>; 2]>>>,
}

impl<T: Real> FeatureCache<T> {
    fn build(p: &ModelParams<T>, items: &[TrainItem<T>], flips: bool, parallel: bool) -> Result<Self> {
        let one = |item: &TrainItem<T>| -> Result<Vec<Vec<[Vec<T>; 2]>>> {
            item.views
                .iter()
                .map(|v| {
                    p.config
                        .columns
                        .iter()
                        .enumerate()
                        .map(|(c, col)| {
                            let img = match col.role {
                                ColumnRole::Low => &v.low,
                                ColumnRole::High => &v.high,
                            };
                            let plain = mlsp_features(p, c, img, false)?;
                            let flipped = if flips { mlsp_features(p, c, img, true)? } else { Vec::new() };
                            Ok([plain, flipped])
                        })
                        .collect()
                })
                .collect()
        };
        let feats = if parallel {
            items.par_iter().map(one).collect::<Result<_>>()?
        } else {
            items.iter().map(one).collect::<Result<_>>()?
        };
        Ok(FeatureCache { feats })
    }

    fn sample(&self, i: usize, v: usize, flip: [bool; 2], n_cols: usize, target: T) -> FeatureSample<'_, T> {
        let f = &self.feats[i][v];
        let pick = |c: usize| -> &[T] {
            if c < n_cols {
                &f[c][flip[c] as usize]
            } else {
                &[]
            }
        };
        FeatureSample {
            features: [pick(0), pick(1)],
            target,
        }
    }

    fn mse(&self, p: &ModelParams<T>, items: &[TrainItem<T>], n_cols: usize, parallel: bool) -> f64 {
        let pairs: Vec<(usize, usize)> = items
            .iter()
            .enumerate()
            .flat_map(|(i, it)| (0..it.views.len()).map(move |v| (i, v)))
            .collect();
        let err = |&(i, v): &(usize, usize)| {
            let s = self.sample(i, v, [false; 2], n_cols, items[i].views[v].target);
            let e = forward_features(p, &s.features[..n_cols]) - s.target;
            e * e
        };
        let sq: Vec<T> = if parallel {
            pairs.par_iter().map(err).collect()
        } else {
            pairs.iter().map(err).collect()
        };
        ordered_sum(sq) / pairs.len() as f64
    }
}
