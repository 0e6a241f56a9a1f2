//! Synthetic cross-resolution dataset.
//!
//! Each image is a procedural texture with hard-edged shapes, degraded at
//! the largest tier by blur, noise and contrast loss scaled by a severity
//! `s` in [0, 1], then resampled to the smaller tiers. Tier scores follow
//!
//! ```text
//! q(tier) = clamp(100 - alpha * s * g(f) * m(f, c), 1, 100)
//! g(f)    = w * f^-e + (1 - w) / f
//! m(f, c) = 1 + kappa * (c - 1/2) * log2 f
//! ```
//!
//! with `f` the downscale factor of the tier relative to L and `c` the
//! texture busyness of the image: downscaling hides degradations, more so
//! on busy content.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use xres_core::dataset::{ImageSource, MosRow, MosTable, TierName, TierSet, SCORE_MAX, SCORE_MIN};
use xres_core::imaging::{build_pyramid, Pyramid, Raster};
use xres_core::rng;
use xres_core::Scalar;
use xres_model::View;

use crate::data::Example;
use crate::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Geometry of tier S; M and L are 2x and 4x.
    pub base: (u32, u32),
    pub alpha: f64,
    pub near_weight: f64,
    pub near_exponent: f64,
    pub masking: f64,
    /// Gaussian blur sigma at L for s = 1, in pixels.
    pub max_blur: f64,
    pub max_noise: f64,
    pub max_contrast_loss: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            base: (64, 48),
            alpha: 90.0,
            near_weight: 0.5,
            near_exponent: 0.35,
            masking: 0.4,
            max_blur: 6.0,
            max_noise: 0.12,
            max_contrast_loss: 0.35,
        }
    }
}

impl SynthConfig {
    /// `g(f) * m(f, c)`; 1 at tier L.
    pub fn attenuation(&self, tier: TierName, busyness: f64) -> f64 {
        let f = tier.downscale_factor() as f64;
        let g = self.near_weight * f.powf(-self.near_exponent) + (1.0 - self.near_weight) / f;
        g * (1.0 + self.masking * (busyness - 0.5) * f.log2())
    }

    pub fn score(&self, severity: f64, busyness: f64, tier: TierName) -> f64 {
        (SCORE_MAX - self.alpha * severity * self.attenuation(tier, busyness)).clamp(SCORE_MIN, SCORE_MAX)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage<T> {
    pub id: String,
    pub severity: f64,
    pub busyness: f64,
    pub pyramid: Pyramid<T>,
    /// Indexed by `TierName as usize`.
    pub mos: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset<T> {
    pub config: SynthConfig,
    pub seed: u64,
    pub tiers: TierSet,
    pub images: Vec<SynthImage<T>>,
}

impl<T: Scalar> SynthDataset<T> {
    pub fn mos_table(&self) -> MosTable {
        let rows = self
            .images
            .iter()
            .flat_map(|im| {
                TierName::ALL.into_iter().map(move |tier| MosRow {
                    image_id: im.id.clone(),
                    tier,
                    mos: im.mos[tier as usize],
                    var: 0.0,
                    n: 1,
                })
            })
            .collect();
        MosTable { rows }
    }

    /// One view per tier; the low-column input of every view is tier S.
    pub fn examples(&self) -> Vec<Example<T>> {
        self.images
            .iter()
            .map(|im| {
                let low = Arc::new(im.pyramid.s.clone());
                let views = TierName::ALL
                    .into_iter()
                    .map(|tier| View {
                        tier,
                        low: low.clone(),
                        high: if tier == TierName::S { low.clone() } else { Arc::new(im.pyramid.get(tier).clone()) },
                        target: T::lit(im.mos[tier as usize]),
                    })
                    .collect();
                Example {
                    id: im.id.clone(),
                    source: ImageSource::Synthetic,
                    views,
                }
            })
            .collect()
    }
}

pub fn synth_crossres<T: Scalar>(n_images: usize, seed: u64) -> Result<SynthDataset<T>> {
    synth_crossres_with(n_images, seed, &SynthConfig::default())
}

pub fn synth_crossres_with<T: Scalar>(n_images: usize, seed: u64, cfg: &SynthConfig) -> Result<SynthDataset<T>> {
    if n_images == 0 {
        return Err(HarnessError::Input("synthetic dataset needs at least one image".into()));
    }
    let tiers = TierSet::from_base(cfg.base.0, cfg.base.1).map_err(|e| HarnessError::Input(e.to_string()))?;
    let images = (0..n_images)
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let severity: f64 = r.random_range(0.0..1.0);
            let busyness: f64 = r.random_range(0.0..1.0);
            let l = tiers.get(TierName::L);
            let clean = render(&mut r, l.width as usize, l.height as usize, busyness);
            let degraded = degrade(&mut r, clean, severity, cfg);
            let p = build_pyramid(&degraded, &tiers).map_err(|e| HarnessError::Input(e.to_string()))?;
            let mos = TierName::ALL.map(|t| cfg.score(severity, busyness, t));
            Ok(SynthImage {
                id: format!("syn{i:05}"),
                severity,
                busyness,
                pyramid: Pyramid {
                    tiers: p.tiers,
                    s: p.s.cast(),
                    m: p.m.cast(),
                    l: p.l.cast(),
                },
                mos,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SynthDataset {
        config: cfg.clone(),
        seed,
        tiers,
        images,
    })
}

/// Oriented sinusoids (more and finer with busyness) over a flat colour,
/// plus a few axis-aligned rectangles.
fn render(r: &mut impl Rng, w: usize, h: usize, busyness: f64) -> Raster<f64> {
    let base: [f64; 3] = [r.random_range(0.3..0.7), r.random_range(0.3..0.7), r.random_range(0.3..0.7)];
    let n_waves = 3 + (busyness * 6.0) as usize;
    let waves: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..n_waves)
        .map(|_| {
            let cycles = r.random_range(1.5..(3.0 + 30.0 * busyness));
            let theta: f64 = r.random_range(0.0..std::f64::consts::PI);
            let phase = r.random_range(0.0..std::f64::consts::TAU);
            let amp = (0.04 + 0.12 * busyness) * r.random_range(0.5..1.0);
            let tint = [r.random_range(0.6..1.0), r.random_range(0.6..1.0), r.random_range(0.6..1.0)];
            (cycles * std::f64::consts::TAU / w as f64, theta, phase, amp, tint)
        })
        .collect();
    let rects: Vec<(usize, usize, usize, usize, [f64; 3])> = (0..r.random_range(2..6))
        .map(|_| {
            let (x0, y0) = (r.random_range(0..w - 8), r.random_range(0..h - 8));
            let (x1, y1) = (r.random_range(x0 + 4..w), r.random_range(y0 + 4..h));
            let d = [r.random_range(-0.25..0.25), r.random_range(-0.25..0.25), r.random_range(-0.25..0.25)];
            (x0, y0, x1, y1, d)
        })
        .collect();
    // each wave is advanced along a row by rotating (sin, cos)
    let steps: Vec<(f64, f64)> = waves.iter().map(|(k, theta, ..)| ((k * theta.cos()).sin(), (k * theta.cos()).cos())).collect();
    let mut samples = Vec::with_capacity(w * h * 3);
    let mut sc = vec![(0.0, 0.0); waves.len()];
    for y in 0..h {
        for ((k, theta, phase, ..), v) in waves.iter().zip(&mut sc) {
            let a = k * y as f64 * theta.sin() + phase;
            *v = (a.sin(), a.cos());
        }
        for x in 0..w {
            for c in 0..3 {
                let mut v = base[c];
                for ((_, _, _, amp, tint), (s, _)) in waves.iter().zip(&sc) {
                    v += amp * tint[c] * s;
                }
                for (x0, y0, x1, y1, d) in &rects {
                    if (*x0..*x1).contains(&x) && (*y0..*y1).contains(&y) {
                        v += d[c];
                    }
                }
                samples.push(v.clamp(0.0, 1.0));
            }
            for ((s, c), (ds, dc)) in sc.iter_mut().zip(&steps) {
                (*s, *c) = (*s * dc + *c * ds, *c * dc - *s * ds);
            }
        }
    }
    Raster::new(w, h, 3, samples).expect("valid geometry")
}

fn degrade(r: &mut impl Rng, img: Raster<f64>, s: f64, cfg: &SynthConfig) -> Raster<f64> {
    let img = gaussian_blur(&img, cfg.max_blur * s);
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let n = img.samples().len() as f64;
    let mean = img.samples().iter().sum::<f64>() / n;
    let gain = 1.0 - cfg.max_contrast_loss * s;
    let noise = Normal::new(0.0, (cfg.max_noise * s).max(1e-12)).expect("positive sigma");
    let samples = img
        .into_samples()
        .into_iter()
        .map(|v| (mean + (v - mean) * gain + noise.sample(r)).clamp(0.0, 1.0))
        .collect();
    Raster::new(w, h, ch, samples).expect("same geometry")
}

pub fn gaussian_blur(img: &Raster<f64>, sigma: f64) -> Raster<f64> {
    if sigma < 0.3 {
        return img.clone();
    }
    let rad = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-rad..=rad).map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp()).collect();
    let ks: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / ks).collect();
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let r = rad as usize;
    // 1-D blur of every line of `n` samples spaced `stride` apart, starting at `starts`
    let pass = |src: &[f64], n: usize, stride: usize, starts: Vec<usize>| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        let mut line = vec![0.0; n + 2 * r];
        for s0 in starts {
            for (i, v) in line.iter_mut().enumerate() {
                let j = (i as isize - rad).clamp(0, n as isize - 1) as usize;
                *v = src[s0 + j * stride];
            }
            for i in 0..n {
                out[s0 + i * stride] = line[i..i + k.len()].iter().zip(&k).map(|(a, b)| a * b).sum();
            }
        }
        out
    };
    let rows = (0..h).flat_map(|y| (0..ch).map(move |c| y * w * ch + c)).collect();
    let tmp = pass(img.samples(), w, ch, rows);
    let cols = (0..w * ch).collect();
    Raster::new(w, h, ch, pass(&tmp, h, w * ch, cols)).expect("same geometry")
}
