//! Architecture configuration and parameter storage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use xres_core::dataset::TierSet;
use xres_core::rng;

use crate::gemm::Real;
use crate::{ModelError, Result};

pub const DEFAULT_STAGES: [usize; 5] = [8, 16, 32, 64, 128];
pub const DEFAULT_BOTTLENECK: usize = 64;
pub const DEFAULT_HEAD: [usize; 2] = [64, 16];
pub const NORM_EPS: f64 = 1e-3;

/// Which input a column reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    /// Always the image resized to the smallest tier geometry.
    Low,
    /// The image at its native tier geometry.
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnConfig {
    pub role: ColumnRole,
    /// Output channels of each 3x3 stride-2 stage.
    pub stages: Vec<usize>,
}

impl ColumnConfig {
    pub fn feature_dim(&self) -> usize {
        self.stages.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub columns: Vec<ColumnConfig>,
    pub in_channels: usize,
    /// Geometry of the smallest tier; the others are x2 and x4.
    pub base: (u32, u32),
    pub bottleneck: usize,
    pub head: Vec<usize>,
    pub norm_eps: f64,
}

impl ModelConfig {
    fn with_roles(roles: &[ColumnRole], stages: &[usize], base: (u32, u32)) -> Self {
        ModelConfig {
            columns: roles
                .iter()
                .map(|&role| ColumnConfig {
                    role,
                    stages: stages.to_vec(),
                })
                .collect(),
            in_channels: 3,
            base,
            bottleneck: DEFAULT_BOTTLENECK,
            head: DEFAULT_HEAD.to_vec(),
            norm_eps: NORM_EPS,
        }
    }

    /// Low-resolution and native-resolution columns.
    pub fn two_column(stages: &[usize], base: (u32, u32)) -> Self {
        Self::with_roles(&[ColumnRole::Low, ColumnRole::High], stages, base)
    }

    pub fn single_column(role: ColumnRole, stages: &[usize], base: (u32, u32)) -> Self {
        Self::with_roles(&[role], stages, base)
    }

    pub fn tiers(&self) -> Result<TierSet> {
        TierSet::from_base(self.base.0, self.base.1).map_err(|e| ModelError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.columns.is_empty() || self.columns.len() > 2 {
            return fail(format!("{} columns; need 1 or 2", self.columns.len()));
        }
        for (i, c) in self.columns.iter().enumerate() {
            if c.stages.len() < 2 {
                return fail(format!("column {i} has {} stages; need at least 2", c.stages.len()));
            }
            if c.stages.contains(&0) {
                return fail(format!("column {i} has a zero-channel stage"));
            }
        }
        if self.in_channels == 0 || self.bottleneck == 0 || self.head.contains(&0) {
            return fail("zero-sized layer".into());
        }
        if !(self.norm_eps > 0.0) {
            return fail("norm_eps must be positive".into());
        }
        self.tiers()?;
        Ok(())
    }

    pub fn head_input(&self) -> usize {
        self.columns.len() * self.bottleneck
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight { column: usize, stage: usize },
    ConvBias { column: usize, stage: usize },
    NormGamma { column: usize, stage: usize },
    NormBeta { column: usize, stage: usize },
    BottleneckWeight { column: usize },
    BottleneckBias { column: usize },
    HeadWeight { layer: usize },
    HeadBias { layer: usize },
}

impl ParamKind {
    pub fn is_column(self) -> bool {
        matches!(
            self,
            ParamKind::ConvWeight { .. }
                | ParamKind::ConvBias { .. }
                | ParamKind::NormGamma { .. }
                | ParamKind::NormBeta { .. }
        )
    }

    pub fn is_norm(self) -> bool {
        matches!(self, ParamKind::NormGamma { .. } | ParamKind::NormBeta { .. })
    }

    pub fn name(self) -> String {
        match self {
            ParamKind::ConvWeight { column, stage } => format!("col{column}.stage{stage}.conv.w"),
            ParamKind::ConvBias { column, stage } => format!("col{column}.stage{stage}.conv.b"),
            ParamKind::NormGamma { column, stage } => format!("col{column}.stage{stage}.norm.gamma"),
            ParamKind::NormBeta { column, stage } => format!("col{column}.stage{stage}.norm.beta"),
            ParamKind::BottleneckWeight { column } => format!("col{column}.bottleneck.w"),
            ParamKind::BottleneckBias { column } => format!("col{column}.bottleneck.b"),
            ParamKind::HeadWeight { layer } => format!("head.{layer}.w"),
            ParamKind::HeadBias { layer } => format!("head.{layer}.b"),
        }
    }
}

/// Which parameters an optimization pass may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    /// Bottlenecks and head; the columns are frozen.
    Stage1,
    /// Everything except the normalization affine terms.
    Stage2,
    All,
}

impl Trainable {
    pub fn allows(self, kind: ParamKind) -> bool {
        match self {
            Trainable::Stage1 => !kind.is_column(),
            Trainable::Stage2 => !kind.is_norm(),
            Trainable::All => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Running statistics of one normalization stage (not trainable).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub params: Vec<Param<T>>,
    /// `stats[column][stage]`.
    pub stats: Vec<Vec<NormStats<T>>>,
    /// Prediction = `offset + scale * head output`.
    pub output_offset: T,
    pub output_scale: T,
}

/// Parameter indices of one column.
#[derive(Debug, Clone)]
pub(crate) struct ColumnIndex {
    pub conv_w: Vec<usize>,
    pub conv_b: Vec<usize>,
    pub gamma: Vec<usize>,
    pub beta: Vec<usize>,
    pub bottleneck_w: usize,
    pub bottleneck_b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub columns: Vec<ColumnIndex>,
    pub head_w: Vec<usize>,
    pub head_b: Vec<usize>,
}

fn shapes(config: &ModelConfig) -> Vec<(ParamKind, Vec<usize>)> {
    let mut out = Vec::new();
    for (column, col) in config.columns.iter().enumerate() {
        let mut c_in = config.in_channels;
        for (stage, &c) in col.stages.iter().enumerate() {
            out.push((ParamKind::ConvWeight { column, stage }, vec![c, c_in, 3, 3]));
            out.push((ParamKind::ConvBias { column, stage }, vec![c]));
            out.push((ParamKind::NormGamma { column, stage }, vec![c]));
            out.push((ParamKind::NormBeta { column, stage }, vec![c]));
            c_in = c;
        }
        out.push((ParamKind::BottleneckWeight { column }, vec![config.bottleneck, col.feature_dim()]));
        out.push((ParamKind::BottleneckBias { column }, vec![config.bottleneck]));
    }
    let mut n_in = config.head_input();
    for (layer, &n) in config.head.iter().chain(std::iter::once(&1)).enumerate() {
        out.push((ParamKind::HeadWeight { layer }, vec![n, n_in]));
        out.push((ParamKind::HeadBias { layer }, vec![n]));
        n_in = n;
    }
    out
}

/// Number of trainable scalars (running statistics excluded).
pub fn param_count(config: &ModelConfig) -> usize {
    shapes(config).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

/// Deterministic initialization: weights uniform in `±sqrt(6 / fan_in)`,
/// biases and norm shifts zero, norm scales one, running statistics (0, 1).
/// Tensor `i` draws from ChaCha stream `i` of `seed`.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let params = shapes(config)
        .into_iter()
        .enumerate()
        .map(|(i, (kind, shape))| {
            let n: usize = shape.iter().product();
            let data = match kind {
                ParamKind::ConvWeight { .. } | ParamKind::BottleneckWeight { .. } | ParamKind::HeadWeight { .. } => {
                    let fan_in: usize = shape[1..].iter().product();
                    let limit = (6.0 / fan_in as f64).sqrt();
                    let mut r = rng::stream(seed, i as u64);
                    (0..n).map(|_| T::lit(r.random_range(-limit..limit))).collect()
                }
                ParamKind::NormGamma { .. } => vec![T::one(); n],
                _ => vec![T::zero(); n],
            };
            Param { kind, shape, data }
        })
        .collect();
    let stats = config
        .columns
        .iter()
        .map(|c| {
            c.stages
                .iter()
                .map(|&ch| NormStats {
                    mean: vec![T::zero(); ch],
                    var: vec![T::one(); ch],
                })
                .collect()
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        params,
        stats,
        output_offset: T::zero(),
        output_scale: T::one(),
    })
}

impl<T: Real> ModelParams<T> {
    pub(crate) fn layout(&self) -> Layout {
        let n_cols = self.config.columns.len();
        let mut columns: Vec<ColumnIndex> = (0..n_cols)
            .map(|_| ColumnIndex {
                conv_w: Vec::new(),
                conv_b: Vec::new(),
                gamma: Vec::new(),
                beta: Vec::new(),
                bottleneck_w: 0,
                bottleneck_b: 0,
            })
            .collect();
        let (mut head_w, mut head_b) = (Vec::new(), Vec::new());
        for (i, p) in self.params.iter().enumerate() {
            match p.kind {
                ParamKind::ConvWeight { column, .. } => columns[column].conv_w.push(i),
                ParamKind::ConvBias { column, .. } => columns[column].conv_b.push(i),
                ParamKind::NormGamma { column, .. } => columns[column].gamma.push(i),
                ParamKind::NormBeta { column, .. } => columns[column].beta.push(i),
                ParamKind::BottleneckWeight { column } => columns[column].bottleneck_w = i,
                ParamKind::BottleneckBias { column } => columns[column].bottleneck_b = i,
                ParamKind::HeadWeight { .. } => head_w.push(i),
                ParamKind::HeadBias { .. } => head_b.push(i),
            }
        }
        Layout {
            columns,
            head_w,
            head_b,
        }
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn find(&self, kind: ParamKind) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.kind == kind)
    }

    pub fn find_mut(&mut self, kind: ParamKind) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.kind == kind)
    }

    pub fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for p in &mut z.params {
            p.data.fill(T::zero());
        }
        z
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        ModelParams {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    kind: p.kind,
                    shape: p.shape.clone(),
                    data: cv(&p.data),
                })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|c| {
                    c.iter()
                        .map(|s| NormStats {
                            mean: cv(&s.mean),
                            var: cv(&s.var),
                        })
                        .collect()
                })
                .collect(),
            output_offset: U::lit(self.output_offset.as_f64()),
            output_scale: U::lit(self.output_scale.as_f64()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_param_count_closed_form() {
        let cfg = ModelConfig::two_column(&DEFAULT_STAGES, (512, 384));
        // per column: conv weights 9*(3*8 + 8*16 + 16*32 + 32*64 + 64*128),
        // conv biases 248, norm affine 2*248, bottleneck 248*64 + 64
        let conv_w = 9 * (3 * 8 + 8 * 16 + 16 * 32 + 32 * 64 + 64 * 128);
        assert_eq!(conv_w, 98_136);
        let column = conv_w + 248 + 2 * 248 + 248 * 64 + 64;
        let head = (128 * 64 + 64) + (64 * 16 + 16) + (16 + 1);
        assert_eq!(param_count(&cfg), 2 * column + head);
        assert_eq!(param_count(&cfg), 238_945);
        let p = init_params::<f64>(&cfg, 0).unwrap();
        assert_eq!(p.count(), 238_945);
        assert_eq!(p.stats[1].iter().map(|s| s.mean.len()).sum::<usize>(), 248);
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let cfg = ModelConfig::two_column(&[4, 8], (16, 12));
        let a = init_params::<f64>(&cfg, 5).unwrap();
        assert_eq!(a, init_params::<f64>(&cfg, 5).unwrap());
        assert_ne!(a, init_params::<f64>(&cfg, 6).unwrap());
        let w = &a.find(ParamKind::ConvWeight { column: 0, stage: 0 }).unwrap().data;
        let limit = (6.0f64 / 27.0).sqrt();
        assert!(w.iter().all(|v| v.abs() <= limit));
        assert!(a.stats.iter().flatten().all(|s| s.mean.iter().all(|&m| m == 0.0) && s.var.iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = ModelConfig::two_column(&[4, 8], (16, 12));
        cfg.columns[0].stages.clear();
        assert!(init_params::<f64>(&cfg, 0).is_err());
        let one_stage = ModelConfig::two_column(&[4], (16, 12));
        assert!(init_params::<f64>(&one_stage, 0).is_err());
        let bad_base = ModelConfig::two_column(&[4, 8], (16, 10));
        assert!(init_params::<f64>(&bad_base, 0).is_err());
    }

    #[test]
    fn freeze_masks() {
        let c = ParamKind::ConvWeight { column: 0, stage: 1 };
        let g = ParamKind::NormGamma { column: 1, stage: 0 };
        let h = ParamKind::HeadBias { layer: 2 };
        let b = ParamKind::BottleneckWeight { column: 1 };
        assert!(!Trainable::Stage1.allows(c) && !Trainable::Stage1.allows(g));
        assert!(Trainable::Stage1.allows(h) && Trainable::Stage1.allows(b));
        assert!(Trainable::Stage2.allows(c) && !Trainable::Stage2.allows(g));
        assert!(Trainable::All.allows(g));
    }
}
