//! Rasters, 4:3 center cropping and Lanczos-3 pyramids.

use std::path::Path;

use thiserror::Error;

use crate::dataset::{TierName, TierSet};
use crate::Scalar;

/// Lobes of the Lanczos window.
pub const LANCZOS_LOBES: f64 = 3.0;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("raster {width}x{height}x{channels} needs {expected} samples, got {actual}")]
    SampleCount {
        width: usize,
        height: usize,
        channels: usize,
        expected: usize,
        actual: usize,
    },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("image {width}x{height} is smaller than {min_w}x{min_h}")]
    TooSmall {
        width: usize,
        height: usize,
        min_w: usize,
        min_h: usize,
    },
    #[error("crop {width}x{height} is not 4:3")]
    NotFourThree { width: usize, height: usize },
    #[error("output geometry must be at least 1x1")]
    EmptyOutput,
    #[error(transparent)]
    Decode(#[from] image::ImageError),
}

pub type Result<T, E = ImagingError> = std::result::Result<T, E>;

/// Row-major, channel-interleaved image with samples in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<T>,
}

impl<T: Scalar> Raster<T> {
    pub fn new(width: usize, height: usize, channels: usize, samples: Vec<T>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(ImagingError::Channels(channels));
        }
        let expected = width * height * channels;
        if samples.len() != expected {
            return Err(ImagingError::SampleCount {
                width,
                height,
                channels,
                expected,
                actual: samples.len(),
            });
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(ImagingError::NonFinite(i));
        }
        Ok(Self {
            width,
            height,
            channels,
            samples,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    samples.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, samples)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn geometry(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.samples[(y * self.width + x) * self.channels + c]
    }

    /// Sub-raster with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(ImagingError::TooSmall {
                width: self.width,
                height: self.height,
                min_w: x0 + width,
                min_h: y0 + height,
            });
        }
        let c = self.channels;
        let mut samples = Vec::with_capacity(width * height * c);
        for y in y0..y0 + height {
            let row = (y * self.width + x0) * c;
            samples.extend_from_slice(&self.samples[row..row + width * c]);
        }
        Ok(Self {
            width,
            height,
            channels: c,
            samples,
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let c = self.channels;
        let mut samples = Vec::with_capacity(self.samples.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let i = (y * self.width + x) * c;
                samples.extend_from_slice(&self.samples[i..i + c]);
            }
        }
        Self {
            samples,
            ..*self
        }
    }

    /// Converts to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            channels: self.channels,
            samples: self.samples.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Plane-major copy (`[c][y][x]`), the layout the model consumes.
    pub fn to_planar(&self) -> Vec<T> {
        let plane = self.width * self.height;
        let mut out = vec![T::zero(); self.samples.len()];
        for (i, px) in self.samples.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + i] = v;
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let to_u8 = |v: T| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            if self.channels == 3 {
                image::Rgb([to_u8(self.get(x, y, 0)), to_u8(self.get(x, y, 1)), to_u8(self.get(x, y, 2))])
            } else {
                let g = to_u8(self.get(x, y, 0));
                image::Rgb([g, g, g])
            }
        })
    }

    /// PNG-encoded bytes (8-bit RGB, or 8-bit gray for one channel).
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        if self.channels == 1 {
            let to_u8 = |v: T| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
            let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
                image::Luma([to_u8(self.get(x as usize, y as usize, 0))])
            });
            img.write_to(&mut out, image::ImageFormat::Png)?;
        } else {
            self.to_rgb8().write_to(&mut out, image::ImageFormat::Png)?;
        }
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode_png()?).map_err(|e| ImagingError::Decode(e.into()))
    }

    /// Decodes PNG or JPEG. Gray inputs stay single-channel, everything else
    /// becomes RGB; 8-bit values map to `v / 255` without gamma handling.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?;
        Ok(Self::from_dynamic(&img))
    }

    fn from_dynamic(img: &image::DynamicImage) -> Self {
        let scale = T::lit(1.0 / 255.0);
        let (width, height) = (img.width() as usize, img.height() as usize);
        let (channels, raw) = match img.color() {
            image::ColorType::L8 | image::ColorType::L16 => (1, img.to_luma8().into_raw()),
            _ => (3, img.to_rgb8().into_raw()),
        };
        Self {
            width,
            height,
            channels,
            samples: raw.into_iter().map(|v| T::from_u8(v).unwrap() * scale).collect(),
        }
    }
}

/// Largest centered 4:3 sub-raster whose width is a multiple of 4.
pub fn crop_to_4_3<T: Scalar>(img: &Raster<T>) -> Result<Raster<T>> {
    let (w, h) = crop_geometry_4_3(img.width, img.height).ok_or(ImagingError::TooSmall {
        width: img.width,
        height: img.height,
        min_w: 4,
        min_h: 3,
    })?;
    let x0 = (img.width - w) / 2;
    let y0 = (img.height - h) / 2;
    img.crop(x0, y0, w, h)
}

/// `(w, 3w/4)` with `w = 4k` maximal such that it fits in `width x height`.
pub fn crop_geometry_4_3(width: usize, height: usize) -> Option<(usize, usize)> {
    let k = (width / 4).min(height / 3);
    (k > 0).then_some((4 * k, 3 * k))
}

/// The a=3 Lanczos window `sinc(x) sinc(x/3)` on `|x| < 3`.
#[inline]
pub fn lanczos3<T: Scalar>(x: T) -> T {
    let a = T::lit(LANCZOS_LOBES);
    let ax = x.abs();
    if ax >= a {
        return T::zero();
    }
    if ax == T::zero() {
        return T::one();
    }
    if ax.fract() == T::zero() {
        // exact zero crossings
        return T::zero();
    }
    let px = T::lit(std::f64::consts::PI) * x;
    a * px.sin() * (px / a).sin() / (px * px)
}

/// Normalized taps for one output coordinate: `(source index, weight)`.
#[derive(Debug, Clone)]
struct Taps<T> {
    taps: Vec<(usize, T)>,
}

fn axis_taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<Taps<T>> {
    let ratio = T::from_usize_lossy(in_len) / T::from_usize_lossy(out_len);
    let scale = if ratio > T::one() { ratio } else { T::one() };
    let support = T::lit(LANCZOS_LOBES) * scale;
    let half = T::lit(0.5);
    let last = in_len as i64 - 1;
    (0..out_len)
        .map(|i| {
            let center = (T::from_usize_lossy(i) + half) * ratio - half;
            let lo = (center - support).floor().to_i64().unwrap();
            let hi = (center + support).ceil().to_i64().unwrap();
            let mut taps = Vec::with_capacity((hi - lo + 1) as usize);
            let mut total = T::zero();
            for j in lo..=hi {
                let w = lanczos3((T::from_i64(j).unwrap() - center) / scale);
                if w != T::zero() {
                    taps.push((j.clamp(0, last) as usize, w));
                    total += w;
                }
            }
            for t in &mut taps {
                t.1 /= total;
            }
            Taps { taps }
        })
        .collect()
}

/// Separable Lanczos-3 resampling. Downscaling stretches the kernel by the
/// scale factor; weights are normalized per output sample, out-of-range
/// taps are clamped to the border, and the result is clipped to [0, 1].
pub fn lanczos_resample<T: Scalar>(img: &Raster<T>, out_w: usize, out_h: usize) -> Result<Raster<T>> {
    if out_w == 0 || out_h == 0 {
        return Err(ImagingError::EmptyOutput);
    }
    let c = img.channels;
    let xt = axis_taps::<T>(img.width, out_w);
    let yt = axis_taps::<T>(img.height, out_h);

    // horizontal: in_h rows of out_w
    let mut tmp = vec![T::zero(); out_w * img.height * c];
    for y in 0..img.height {
        let src = &img.samples[y * img.width * c..(y + 1) * img.width * c];
        let dst = &mut tmp[y * out_w * c..(y + 1) * out_w * c];
        for (x, taps) in xt.iter().enumerate() {
            for ch in 0..c {
                let mut acc = T::zero();
                for &(j, w) in &taps.taps {
                    acc += src[j * c + ch] * w;
                }
                dst[x * c + ch] = acc;
            }
        }
    }
    // vertical
    let mut out = vec![T::zero(); out_w * out_h * c];
    let row = out_w * c;
    for (y, taps) in yt.iter().enumerate() {
        let dst = &mut out[y * row..(y + 1) * row];
        for &(j, w) in &taps.taps {
            let src = &tmp[j * row..(j + 1) * row];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s * w;
            }
        }
    }
    for v in &mut out {
        *v = v.max(T::zero()).min(T::one());
    }
    Ok(Raster {
        width: out_w,
        height: out_h,
        channels: c,
        samples: out,
    })
}

/// The same crop at every tier.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid<T> {
    pub tiers: TierSet,
    pub s: Raster<T>,
    pub m: Raster<T>,
    pub l: Raster<T>,
}

impl<T: Scalar> Pyramid<T> {
    pub fn get(&self, tier: TierName) -> &Raster<T> {
        match tier {
            TierName::S => &self.s,
            TierName::M => &self.m,
            TierName::L => &self.l,
        }
    }
}

/// Resamples every tier directly from the 4:3 crop (no cascading).
pub fn build_pyramid<T: Scalar>(crop: &Raster<T>, tiers: &TierSet) -> Result<Pyramid<T>> {
    let largest = tiers.largest();
    if crop.width * 3 != crop.height * 4 {
        return Err(ImagingError::NotFourThree {
            width: crop.width,
            height: crop.height,
        });
    }
    if crop.width < largest.width as usize || crop.height < largest.height as usize {
        return Err(ImagingError::TooSmall {
            width: crop.width,
            height: crop.height,
            min_w: largest.width as usize,
            min_h: largest.height as usize,
        });
    }
    let at = |t: TierName| {
        let g = tiers.get(t);
        lanczos_resample(crop, g.width as usize, g.height as usize)
    };
    Ok(Pyramid {
        tiers: *tiers,
        s: at(TierName::S)?,
        m: at(TierName::M)?,
        l: at(TierName::L)?,
    })
}
