//! Binary checkpoints: magic, version, a JSON manifest, then every tensor as
//! little-endian f64 in manifest order.
//!
//! ```text
//! b"XRESMDL\0" | u32 version | u32 manifest_len | manifest | f64 data...
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gemm::Real;
use crate::params::{ModelConfig, ModelParams, NormStats, Param, ParamKind};
use crate::{ModelError, Result};

pub const MAGIC: &[u8; 8] = b"XRESMDL\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum TensorRole {
    Param { kind: ParamKind },
    NormMean { column: usize, stage: usize },
    NormVar { column: usize, stage: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    #[serde(flatten)]
    pub role: TensorRole,
    pub shape: Vec<usize>,
    /// Element offset into the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub output_offset: f64,
    pub output_scale: f64,
    pub tensors: Vec<TensorEntry>,
}

fn corrupt(m: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(m.into())
}

pub fn to_bytes<T: Real>(p: &ModelParams<T>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut data: Vec<f64> = Vec::with_capacity(p.count());
    let mut push = |name: String, role: TensorRole, shape: Vec<usize>, values: &[T]| {
        tensors.push(TensorEntry {
            name,
            role,
            shape,
            offset: data.len(),
        });
        data.extend(values.iter().map(|v| v.as_f64()));
    };
    for q in &p.params {
        push(q.kind.name(), TensorRole::Param { kind: q.kind }, q.shape.clone(), &q.data);
    }
    for (column, col) in p.stats.iter().enumerate() {
        for (stage, s) in col.iter().enumerate() {
            let base = format!("col{column}.stage{stage}.norm");
            push(format!("{base}.mean"), TensorRole::NormMean { column, stage }, vec![s.mean.len()], &s.mean);
            push(format!("{base}.var"), TensorRole::NormVar { column, stage }, vec![s.var.len()], &s.var);
        }
    }
    let manifest = Manifest {
        config: p.config.clone(),
        output_offset: p.output_offset.as_f64(),
        output_scale: p.output_scale.as_f64(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a model checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| corrupt("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| corrupt(e.to_string()))?;
    Ok((manifest, &bytes[16 + len..]))
}

/// Decodes a checkpoint into any scalar type; the expected tensor set is
/// rebuilt from the stored configuration and every entry must match it.
pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<ModelParams<T>> {
    let (m, data) = read_manifest(bytes)?;
    if data.len() % 8 != 0 {
        return Err(corrupt("data section is not a whole number of f64"));
    }
    let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mut p: ModelParams<T> = crate::params::init_params(&m.config, 0)?.zeroed();
    let mut seen = vec![false; p.params.len()];
    let mut seen_stats = 0;
    for t in &m.tensors {
        let n: usize = t.shape.iter().product();
        let slice = values
            .get(t.offset..t.offset + n)
            .ok_or_else(|| corrupt(format!("tensor {} out of range", t.name)))?;
        let conv = |s: &[f64]| s.iter().map(|&v| T::lit(v)).collect::<Vec<T>>();
        match &t.role {
            TensorRole::Param { kind } => {
                let i = p
                    .params
                    .iter()
                    .position(|q| q.kind == *kind)
                    .ok_or_else(|| corrupt(format!("unexpected tensor {}", t.name)))?;
                let q: &mut Param<T> = &mut p.params[i];
                if q.shape != t.shape || seen[i] {
                    return Err(corrupt(format!("tensor {} has a bad shape or repeats", t.name)));
                }
                q.data = conv(slice);
                seen[i] = true;
            }
            TensorRole::NormMean { column, stage } | TensorRole::NormVar { column, stage } => {
                let s: &mut NormStats<T> = p
                    .stats
                    .get_mut(*column)
                    .and_then(|c| c.get_mut(*stage))
                    .ok_or_else(|| corrupt(format!("unexpected tensor {}", t.name)))?;
                let target = if matches!(t.role, TensorRole::NormMean { .. }) { &mut s.mean } else { &mut s.var };
                if target.len() != n {
                    return Err(corrupt(format!("tensor {} has a bad shape", t.name)));
                }
                *target = conv(slice);
                seen_stats += 1;
            }
        }
    }
    let want_stats: usize = p.stats.iter().map(|c| 2 * c.len()).sum();
    if seen.iter().any(|s| !s) || seen_stats != want_stats {
        return Err(corrupt("checkpoint is missing tensors"));
    }
    p.output_offset = T::lit(m.output_offset);
    p.output_scale = T::lit(m.output_scale);
    Ok(p)
}

pub fn save<T: Real>(p: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(p)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
