//! Core of the cross-resolution image quality study platform.
//!
//! The numeric modules ([`imaging`], [`analytics`], [`alignment`]) are generic
//! over a [`Scalar`] (`f32` or `f64`); the aliases below fix the scalar to
//! `f64`, which is what the tooling and the persisted formats use.

pub mod alignment;
pub mod analytics;
pub mod dataset;
pub mod imaging;
pub mod protocol;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod store;

pub use scalar::Scalar;

pub type Raster64 = imaging::Raster<f64>;
pub type Raster32 = imaging::Raster<f32>;
pub type Pyramid64 = imaging::Pyramid<f64>;
pub type QuadMap64 = alignment::QuadMap<f64>;
pub type SosFit64 = analytics::SosFit<f64>;
pub type IccResult64 = analytics::IccResult<f64>;
pub type TestResult64 = analytics::TestResult<f64>;
