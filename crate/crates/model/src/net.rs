//! Forward graph, gradients and inference.

use rayon::prelude::*;

use xres_core::dataset::{TierName, SCORE_MAX, SCORE_MIN};
use xres_core::imaging::{lanczos_resample, Raster};

use crate::gemm::Real;
use crate::params::{ColumnRole, Layout, ModelParams, Trainable};
use crate::tape::{Tape, Var};
use crate::{ModelError, Result};

/// One training/evaluation example. `flip[c]` mirrors column `c`'s input.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a, T> {
    pub low: &'a Raster<T>,
    pub high: &'a Raster<T>,
    pub target: T,
    pub flip: [bool; 2],
}

impl<'a, T> Sample<'a, T> {
    pub fn new(low: &'a Raster<T>, high: &'a Raster<T>, target: T) -> Self {
        Sample {
            low,
            high,
            target,
            flip: [false; 2],
        }
    }
}

/// Per-column features of one example, for training with frozen columns.
#[derive(Debug, Clone, Copy)]
pub struct FeatureSample<'a, T> {
    pub features: [&'a [T]; 2],
    pub target: T,
}

/// Gradients aligned with `ModelParams::params`; frozen tensors are zero.
pub type Gradients<T> = Vec<Vec<T>>;

struct Builder<'p, T> {
    p: &'p ModelParams<T>,
    layout: Layout,
    mask: Option<Trainable>,
    tape: Tape<T>,
    vars: Vec<Option<Var>>,
}

impl<'p, T: Real> Builder<'p, T> {
    fn new(p: &'p ModelParams<T>, mask: Option<Trainable>) -> Self {
        Builder {
            p,
            layout: p.layout(),
            mask,
            tape: Tape::new(),
            vars: vec![None; p.params.len()],
        }
    }

    fn param(&mut self, i: usize) -> Var {
        if let Some(v) = self.vars[i] {
            return v;
        }
        let p = &self.p.params[i];
        let req = self.mask.is_some_and(|m| m.allows(p.kind));
        let v = self.tape.leaf(p.data.clone(), p.shape.clone(), req);
        self.vars[i] = Some(v);
        v
    }

    /// Column `c` on a planar `[c, h, w]` input; returns the concatenated
    /// per-stage GAP features.
    fn column(&mut self, c: usize, planar: Vec<T>, shape: [usize; 3]) -> Var {
        let idx = self.layout.columns[c].clone();
        let eps = T::lit(self.p.config.norm_eps);
        let mut x = self.tape.leaf(planar, shape.to_vec(), false);
        let mut pools = Vec::with_capacity(idx.conv_w.len());
        for s in 0..idx.conv_w.len() {
            let (w, b) = (self.param(idx.conv_w[s]), self.param(idx.conv_b[s]));
            let (g, bt) = (self.param(idx.gamma[s]), self.param(idx.beta[s]));
            let z = self.tape.conv(x, w, b);
            let st = &self.p.stats[c][s];
            let n = self.tape.norm(z, g, bt, &st.mean, &st.var, eps);
            x = self.tape.swish(n);
            pools.push(self.tape.gap(x));
        }
        self.tape.concat(&pools)
    }

    /// Bottlenecks, head and output affine over per-column feature vectors.
    fn head(&mut self, features: &[Var]) -> Var {
        let layout = self.layout.clone();
        let mut codes = Vec::with_capacity(features.len());
        for (c, &f) in features.iter().enumerate() {
            let (w, b) = (
                self.param(layout.columns[c].bottleneck_w),
                self.param(layout.columns[c].bottleneck_b),
            );
            let d = self.tape.dense(f, w, b);
            codes.push(self.tape.swish(d));
        }
        let mut h = if codes.len() == 1 { codes[0] } else { self.tape.concat(&codes) };
        let last = layout.head_w.len() - 1;
        for l in 0..=last {
            let (w, b) = (self.param(layout.head_w[l]), self.param(layout.head_b[l]));
            h = self.tape.dense(h, w, b);
            if l < last {
                h = self.tape.swish(h);
            }
        }
        self.tape.affine(h, self.p.output_offset, self.p.output_scale)
    }

    fn gradients(&self, root: Var, seed: T) -> Gradients<T> {
        let mut g = self.tape.backward(root, vec![seed]);
        self.p
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                self.vars[i]
                    .and_then(|v| g[v].take())
                    .unwrap_or_else(|| vec![T::zero(); p.data.len()])
            })
            .collect()
    }
}

fn flip_planar<T: Real>(planar: &mut [T], w: usize) {
    for row in planar.chunks_mut(w) {
        row.reverse();
    }
}

fn check_input<T: Real>(p: &ModelParams<T>, role: ColumnRole, img: &Raster<T>) -> Result<()> {
    let tiers = p.config.tiers()?;
    if img.channels() != p.config.in_channels {
        return Err(ModelError::Input(format!(
            "{} channels, model expects {}",
            img.channels(),
            p.config.in_channels
        )));
    }
    let (w, h) = img.geometry();
    let low = tiers.get(TierName::S).geometry();
    let ok = match role {
        ColumnRole::Low => (w as u32, h as u32) == low,
        ColumnRole::High => tiers.by_geometry(w as u32, h as u32).is_some(),
    };
    if ok {
        Ok(())
    } else {
        Err(ModelError::Input(format!("{w}x{h} is not a valid {role:?} column geometry")))
    }
}

fn column_input<T: Real>(img: &Raster<T>, flip: bool) -> (Vec<T>, [usize; 3]) {
    let mut planar = img.to_planar();
    if flip {
        flip_planar(&mut planar, img.width());
    }
    (planar, [img.channels(), img.height(), img.width()])
}

fn build_sample<'p, T: Real>(p: &'p ModelParams<T>, s: &Sample<T>, mask: Option<Trainable>) -> Result<(Builder<'p, T>, Var)> {
    let mut b = Builder::new(p, mask);
    let mut feats = Vec::with_capacity(p.config.columns.len());
    for (c, col) in p.config.columns.iter().enumerate() {
        let img = match col.role {
            ColumnRole::Low => s.low,
            ColumnRole::High => s.high,
        };
        check_input(p, col.role, img)?;
        let (planar, shape) = column_input(img, s.flip[c]);
        feats.push(b.column(c, planar, shape));
    }
    let out = b.head(&feats);
    Ok((b, out))
}

/// Multi-level features of column `column`: the global average of every
/// stage's activation, concatenated from the first to the last stage.
pub fn mlsp_features<T: Real>(p: &ModelParams<T>, column: usize, img: &Raster<T>, flip: bool) -> Result<Vec<T>> {
    let col = p
        .config
        .columns
        .get(column)
        .ok_or_else(|| ModelError::Input(format!("no column {column}")))?;
    check_input(p, col.role, img)?;
    let mut b = Builder::new(p, None);
    let (planar, shape) = column_input(img, flip);
    let f = b.column(column, planar, shape);
    Ok(b.tape.value(f).to_vec())
}

/// Raw (unclamped) prediction.
pub fn forward<T: Real>(p: &ModelParams<T>, low: &Raster<T>, high: &Raster<T>) -> Result<T> {
    forward_sample(p, &Sample::new(low, high, T::zero()))
}

pub fn forward_sample<T: Real>(p: &ModelParams<T>, s: &Sample<T>) -> Result<T> {
    let (b, out) = build_sample(p, s, None)?;
    Ok(b.tape.value(out)[0])
}

/// Raw prediction from precomputed column features.
pub fn forward_features<T: Real>(p: &ModelParams<T>, features: &[&[T]]) -> T {
    let mut b = Builder::new(p, None);
    let vars: Vec<Var> = features
        .iter()
        .take(p.config.columns.len())
        .map(|f| b.tape.leaf(f.to_vec(), vec![f.len()], false))
        .collect();
    let out = b.head(&vars);
    b.tape.value(out)[0]
}

fn sample_grad<T: Real>(p: &ModelParams<T>, s: &Sample<T>, mask: Trainable, n: T) -> Result<(T, Gradients<T>)> {
    let (b, out) = build_sample(p, s, Some(mask))?;
    let err = b.tape.value(out)[0] - s.target;
    Ok((err * err, b.gradients(out, T::lit(2.0) * err / n)))
}

fn feature_grad<T: Real>(p: &ModelParams<T>, s: &FeatureSample<T>, mask: Trainable, n: T) -> (T, Gradients<T>) {
    let mut b = Builder::new(p, Some(mask));
    let vars: Vec<Var> = s.features[..p.config.columns.len()]
        .iter()
        .map(|f| b.tape.leaf(f.to_vec(), vec![f.len()], false))
        .collect();
    let out = b.head(&vars);
    let err = b.tape.value(out)[0] - s.target;
    (err * err, b.gradients(out, T::lit(2.0) * err / n))
}

fn reduce<T: Real>(p: &ModelParams<T>, parts: Vec<(T, Gradients<T>)>, n: T) -> (T, Gradients<T>) {
    let mut total: Gradients<T> = p.params.iter().map(|q| vec![T::zero(); q.data.len()]).collect();
    let mut sse = T::zero();
    for (e, g) in parts {
        sse += e;
        for (t, gi) in total.iter_mut().zip(g) {
            t.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
    }
    (sse / n, total)
}

/// Mean squared error over `batch` and its gradient with respect to every
/// parameter `mask` allows (zeros elsewhere). Per-example gradients are
/// summed in batch order, also when computed in parallel.
pub fn loss_and_gradients<T: Real>(
    p: &ModelParams<T>,
    batch: &[Sample<T>],
    mask: Trainable,
    parallel: bool,
) -> Result<(T, Gradients<T>)> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let n = T::from_usize_lossy(batch.len());
    let parts: Vec<(T, Gradients<T>)> = if parallel {
        batch.par_iter().map(|s| sample_grad(p, s, mask, n)).collect::<Result<_>>()?
    } else {
        batch.iter().map(|s| sample_grad(p, s, mask, n)).collect::<Result<_>>()?
    };
    Ok(reduce(p, parts, n))
}

/// [`loss_and_gradients`] with frozen columns on cached features.
pub fn head_loss_and_gradients<T: Real>(
    p: &ModelParams<T>,
    batch: &[FeatureSample<T>],
    mask: Trainable,
    parallel: bool,
) -> Result<(T, Gradients<T>)> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let n = T::from_usize_lossy(batch.len());
    let parts: Vec<(T, Gradients<T>)> = if parallel {
        batch.par_iter().map(|s| feature_grad(p, s, mask, n)).collect()
    } else {
        batch.iter().map(|s| feature_grad(p, s, mask, n)).collect()
    };
    Ok(reduce(p, parts, n))
}

/// The low-column input for an image at any tier geometry.
pub fn low_input<T: Real>(p: &ModelParams<T>, img: &Raster<T>) -> Result<Raster<T>> {
    let tiers = p.config.tiers()?;
    let (w, h) = tiers.get(TierName::S).geometry();
    if img.geometry() == (w as usize, h as usize) {
        return Ok(img.clone());
    }
    lanczos_resample(img, w as usize, h as usize).map_err(|e| ModelError::Input(e.to_string()))
}

/// Score in [1, 100] for an image at one of the model's tier geometries.
/// The low column receives the image resampled to the smallest tier.
pub fn predict<T: Real>(p: &ModelParams<T>, img: &Raster<T>) -> Result<T> {
    let tiers = p.config.tiers()?;
    let (w, h) = img.geometry();
    if tiers.by_geometry(w as u32, h as u32).is_none() {
        return Err(ModelError::Input(format!("{w}x{h} matches no supported tier")));
    }
    let low = low_input(p, img)?;
    let raw = forward(p, &low, img)?;
    Ok(raw.max(T::lit(SCORE_MIN)).min(T::lit(SCORE_MAX)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{init_params, ModelConfig, ParamKind};
    use crate::tape::swish;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::two_column(&[3, 4], (8, 6));
        c.bottleneck = 5;
        c.head = vec![4, 3];
        c
    }

    fn img(w: usize, h: usize, seed: u64) -> Raster<f64> {
        use rand::Rng;
        let mut r = xres_core::rng::seeded(seed);
        Raster::from_fn(w, h, 3, |_, _, _| r.random_range(0.0..1.0)).unwrap()
    }

    #[test]
    fn zero_params_output_final_bias() {
        let mut p = init_params::<f64>(&cfg(), 1).unwrap().zeroed();
        let last = p.layout().head_b[2];
        p.params[last].data[0] = 3.25;
        let y = forward(&p, &img(8, 6, 1), &img(16, 12, 2)).unwrap();
        assert_eq!(y, 3.25);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let mut p = init_params::<f64>(&cfg(), 3).unwrap();
        for q in &mut p.params {
            if matches!(q.kind, ParamKind::ConvBias { .. }) {
                q.data.fill(0.0);
            }
        }
        let zero = Raster::filled(8, 6, 3, 0.0).unwrap();
        let f = mlsp_features(&p, 0, &zero, false).unwrap();
        assert_eq!(f.len(), 7);
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centre_tap_column_on_constant_image() {
        // one output channel per stage, only the centre tap of channel 0 set
        let mut c = ModelConfig::single_column(ColumnRole::Low, &[1, 1], (8, 6));
        c.in_channels = 1;
        let mut p = init_params::<f64>(&c, 0).unwrap().zeroed();
        for q in &mut p.params {
            match q.kind {
                ParamKind::ConvWeight { stage: 0, .. } => q.data[4] = 0.8,
                ParamKind::ConvBias { stage: 0, .. } => q.data[0] = 0.1,
                ParamKind::NormGamma { .. } => q.data.fill(1.0),
                _ => {}
            }
        }
        let value = 0.6;
        let flat = Raster::filled(8, 6, 1, value).unwrap();
        let f = mlsp_features(&p, 0, &flat, false).unwrap();
        let expected = swish((value * 0.8 + 0.1) / (1.0 + 1e-3f64).sqrt());
        assert!((f[0] - expected).abs() < 1e-15, "{} vs {expected}", f[0]);
    }

    #[test]
    fn columns_are_asymmetric() {
        let p = init_params::<f64>(&cfg(), 7).unwrap();
        let (a, b) = (img(8, 6, 1), img(8, 6, 2));
        assert_ne!(forward(&p, &a, &b).unwrap(), forward(&p, &b, &a).unwrap());
    }

    #[test]
    fn zeroed_high_bottleneck_ignores_high_input() {
        let mut p = init_params::<f64>(&cfg(), 8).unwrap();
        let l = p.layout();
        p.params[l.columns[1].bottleneck_w].data.fill(0.0);
        p.params[l.columns[1].bottleneck_b].data.fill(0.0);
        let low = img(8, 6, 1);
        let a = forward(&p, &low, &img(16, 12, 5)).unwrap();
        let b = forward(&p, &low, &img(32, 24, 6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn geometry_errors() {
        let p = init_params::<f64>(&cfg(), 1).unwrap();
        assert!(forward(&p, &img(16, 12, 1), &img(16, 12, 1)).is_err());
        assert!(forward(&p, &img(8, 6, 1), &img(12, 9, 1)).is_err());
        let gray = Raster::<f64>::filled(8, 6, 1, 0.5).unwrap();
        assert!(forward(&p, &gray, &img(8, 6, 1)).is_err());
        assert!(predict(&p, &img(10, 6, 1)).is_err());
    }

    #[test]
    fn predict_clamps_and_uses_identical_raster_at_s() {
        let mut p = init_params::<f64>(&cfg(), 2).unwrap();
        let s = img(8, 6, 3);
        assert_eq!(predict(&p, &s).unwrap(), forward(&p, &s, &s).unwrap().clamp(1.0, 100.0));
        p.output_offset = 500.0;
        assert_eq!(predict(&p, &img(32, 24, 3)).unwrap(), 100.0);
        p.output_offset = -500.0;
        assert_eq!(predict(&p, &img(16, 12, 3)).unwrap(), 1.0);
    }

    #[test]
    fn single_sample_loss_is_squared_prediction() {
        let p = init_params::<f64>(&cfg(), 4).unwrap();
        let (lo, hi) = (img(8, 6, 1), img(16, 12, 2));
        let pred = forward(&p, &lo, &hi).unwrap();
        let (loss, _) = loss_and_gradients(&p, &[Sample::new(&lo, &hi, 0.0)], Trainable::All, false).unwrap();
        assert!((loss - pred * pred).abs() < 1e-12);
        let (loss, g) = loss_and_gradients(&p, &[Sample::new(&lo, &hi, pred)], Trainable::All, false).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().flatten().all(|&v| v == 0.0));
        assert!(loss_and_gradients::<f64>(&p, &[], Trainable::All, false).is_err());
    }

    #[test]
    fn stage1_mask_zeroes_column_gradients() {
        let p = init_params::<f64>(&cfg(), 4).unwrap();
        let (lo, hi) = (img(8, 6, 1), img(16, 12, 2));
        let (_, g) = loss_and_gradients(&p, &[Sample::new(&lo, &hi, 50.0)], Trainable::Stage1, false).unwrap();
        for (q, gi) in p.params.iter().zip(&g) {
            if q.kind.is_column() {
                assert!(gi.iter().all(|&v| v == 0.0));
            } else {
                assert!(gi.iter().any(|&v| v != 0.0), "{:?}", q.kind);
            }
        }
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let p = init_params::<f64>(&cfg(), 9).unwrap();
        let imgs: Vec<(Raster<f64>, Raster<f64>)> = (0..6).map(|i| (img(8, 6, i), img(16, 12, 100 + i))).collect();
        let batch: Vec<Sample<f64>> = imgs
            .iter()
            .enumerate()
            .map(|(i, (a, b))| Sample {
                flip: [i % 2 == 0, i % 3 == 0],
                ..Sample::new(a, b, 10.0 * i as f64)
            })
            .collect();
        let s = loss_and_gradients(&p, &batch, Trainable::Stage2, false).unwrap();
        let q = loss_and_gradients(&p, &batch, Trainable::Stage2, true).unwrap();
        assert_eq!(s, q);
    }

    #[test]
    fn cached_features_match_full_forward() {
        let p = init_params::<f64>(&cfg(), 10).unwrap();
        let (lo, hi) = (img(8, 6, 1), img(32, 24, 2));
        let f0 = mlsp_features(&p, 0, &lo, true).unwrap();
        let f1 = mlsp_features(&p, 1, &hi, false).unwrap();
        let full = forward_sample(&p, &Sample { flip: [true, false], ..Sample::new(&lo, &hi, 0.0) }).unwrap();
        assert!((forward_features(&p, &[&f0, &f1]) - full).abs() < 1e-12);
    }
}
