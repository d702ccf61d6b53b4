use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, LayerNorm, Linear};
use crate::error::{config_err, Result};
use crate::kan::{GridConfig, KanConv2d, KanLinear, KanOptions};

/// What fills each local slot of a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LocalBlockKind {
    /// LGCK with a grouped KAN convolution, followed by SFFN.
    #[default]
    KanConv,
    /// LGCK with an ordinary grouped 3×3 convolution, followed by SFFN.
    PlainConv,
    /// Basic two-conv residual block in place of the whole LIK pair.
    Residual,
    /// ConvNeXt block in place of the whole LIK pair.
    #[serde(alias = "convnext")]
    ConvNext,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GlobalMixerKind {
    #[default]
    Kan,
    Mlp,
    /// GIK slots are dropped entirely.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub dim: usize,
    pub num_lik: usize,
    #[serde(default)]
    pub num_gik: usize,
    #[serde(default = "default_groups")]
    pub groups: usize,
    /// 2×2 stride-2 patch embedding before the stage.
    #[serde(default)]
    pub downsample: bool,
}

fn default_groups() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MedKanConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Strides of the two 3×3 stem convolutions.
    pub stem_strides: [usize; 2],
    pub stages: Vec<StageSpec>,
    pub local_block: LocalBlockKind,
    pub global_mixer: GlobalMixerKind,
    pub gik_residual: bool,
    /// Stacked KAN layers per GIK block.
    pub gik_depth: usize,
    /// Largest `h·w` a GIK block accepts.
    pub token_limit: usize,
    pub sffn_ratio: usize,
    pub grid: GridConfig,
    /// `W_b·silu(x)` branch in every KAN layer.
    pub kan_base: bool,
}

impl Default for MedKanConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            in_channels: 3,
            num_classes: 11,
            stem_strides: [2, 2],
            stages: vec![
                StageSpec { dim: 64, num_lik: 2, num_gik: 0, groups: 8, downsample: false },
                StageSpec { dim: 128, num_lik: 2, num_gik: 0, groups: 8, downsample: true },
                StageSpec { dim: 256, num_lik: 4, num_gik: 1, groups: 8, downsample: true },
                StageSpec { dim: 512, num_lik: 2, num_gik: 1, groups: 8, downsample: true },
            ],
            local_block: LocalBlockKind::KanConv,
            global_mixer: GlobalMixerKind::Kan,
            gik_residual: true,
            gik_depth: 2,
            token_limit: 256,
            sffn_ratio: 4,
            grid: GridConfig::default(),
            kan_base: true,
        }
    }
}

/// Resolved spatial plan of a validated config.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Geometry {
    /// Side after each stem conv.
    pub stem: [usize; 2],
    /// Side inside each stage.
    pub stages: Vec<usize>,
}

impl MedKanConfig {
    /// The six local/global combinations of the ablation study, in table
    /// order.
    pub const ABLATIONS: [(LocalBlockKind, GlobalMixerKind); 6] = [
        (LocalBlockKind::Residual, GlobalMixerKind::Kan),
        (LocalBlockKind::ConvNext, GlobalMixerKind::Kan),
        (LocalBlockKind::PlainConv, GlobalMixerKind::Kan),
        (LocalBlockKind::KanConv, GlobalMixerKind::None),
        (LocalBlockKind::KanConv, GlobalMixerKind::Mlp),
        (LocalBlockKind::KanConv, GlobalMixerKind::Kan),
    ];

    pub fn kan_options(&self) -> KanOptions {
        KanOptions { base: self.kan_base, bias: true }
    }

    pub fn stem_hidden(&self) -> usize {
        (self.stages.first().map_or(2, |s| s.dim) / 2).max(1)
    }

    /// Checks every structural constraint and returns the spatial plan.
    pub fn validate(&self) -> Result<Geometry> {
        if self.input_size == 0 || self.in_channels == 0 {
            return Err(config_err("input_size and in_channels must be positive"));
        }
        if self.num_classes < 2 {
            return Err(config_err(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.stages.is_empty() {
            return Err(config_err("at least one stage is required"));
        }
        if self.sffn_ratio == 0 {
            return Err(config_err("sffn_ratio must be positive"));
        }
        if self.global_mixer == GlobalMixerKind::Kan && self.gik_depth == 0 {
            return Err(config_err("gik_depth must be positive"));
        }
        self.grid.build()?;

        let mut side = self.input_size;
        let mut stem = [0; 2];
        for (i, &s) in self.stem_strides.iter().enumerate() {
            if s == 0 || side % s != 0 {
                return Err(config_err(format!(
                    "input side {side} is not divisible by stem stride {s}"
                )));
            }
            side /= s;
            stem[i] = side;
        }

        let mut stages = Vec::with_capacity(self.stages.len());
        let mut prev_dim = self.stages[0].dim;
        for (i, st) in self.stages.iter().enumerate() {
            if st.dim == 0 || st.groups == 0 || st.dim % st.groups != 0 {
                return Err(config_err(format!(
                    "stage {i}: dim {} is not divisible by groups {}",
                    st.dim, st.groups
                )));
            }
            if st.downsample {
                if side < 2 || side % 2 != 0 {
                    return Err(config_err(format!(
                        "stage {i}: cannot patch-embed a {side}x{side} map (side must be even)"
                    )));
                }
                side /= 2;
            } else if st.dim != prev_dim {
                return Err(config_err(format!(
                    "stage {i}: width changes {prev_dim} -> {} without a patch embedding",
                    st.dim
                )));
            }
            if st.num_gik > 0
                && self.global_mixer != GlobalMixerKind::None
                && side * side > self.token_limit
            {
                return Err(config_err(format!(
                    "stage {i}: GIK over {side}x{side} = {} tokens exceeds the token limit {}; \
                     move GIK blocks to a later, lower-resolution stage",
                    side * side,
                    self.token_limit
                )));
            }
            prev_dim = st.dim;
            stages.push(side);
        }
        Ok(Geometry { stem, stages })
    }

    /// Exact learnable-scalar count, in closed form.
    pub fn param_count(&self) -> Result<usize> {
        let geo = self.validate()?;
        let k = self.grid.num_basis;
        let kan = self.kan_options();
        let d0 = self.stages[0].dim;
        let h = self.stem_hidden();

        let mut total = Conv2d::param_count(self.in_channels, h, 3, 1, true)
            + LayerNorm::param_count(h)
            + Conv2d::param_count(h, d0, 3, 1, true)
            + LayerNorm::param_count(d0);

        let mut prev = d0;
        for (st, &side) in self.stages.iter().zip(&geo.stages) {
            let d = st.dim;
            if st.downsample {
                total += Conv2d::param_count(prev, d, 2, 1, true) + LayerNorm::param_count(d);
            }
            let sffn = sffn_params(d, self.sffn_ratio);
            let local = match self.local_block {
                LocalBlockKind::KanConv => {
                    LayerNorm::param_count(d) + KanConv2d::param_count(d, d, 3, st.groups, k, kan) + sffn
                }
                LocalBlockKind::PlainConv => {
                    LayerNorm::param_count(d) + Conv2d::param_count(d, d, 3, st.groups, true) + sffn
                }
                LocalBlockKind::Residual => {
                    2 * (Conv2d::param_count(d, d, 3, 1, false) + LayerNorm::param_count(d))
                }
                LocalBlockKind::ConvNext => {
                    Conv2d::param_count(d, d, 7, d, true)
                        + LayerNorm::param_count(d)
                        + Conv2d::param_count(d, 4 * d, 1, 1, true)
                        + Conv2d::param_count(4 * d, d, 1, 1, true)
                }
            };
            total += st.num_lik * local;
            let tokens = side * side;
            let global = match self.global_mixer {
                GlobalMixerKind::Kan => {
                    LayerNorm::param_count(d)
                        + self.gik_depth * KanLinear::param_count(tokens, tokens, k, kan)
                        + sffn
                }
                GlobalMixerKind::Mlp => {
                    LayerNorm::param_count(d) + 2 * Linear::param_count(tokens, tokens) + sffn
                }
                GlobalMixerKind::None => 0,
            };
            total += st.num_gik * global;
            prev = d;
        }
        total += LayerNorm::param_count(prev) + Linear::param_count(prev, self.num_classes);
        Ok(total)
    }
}

pub(crate) fn sffn_params(d: usize, ratio: usize) -> usize {
    let hidden = d * ratio;
    LayerNorm::param_count(d)
        + Conv2d::param_count(d, hidden, 1, 1, true)
        + Conv2d::param_count(hidden, hidden, 3, hidden, true)
        + Conv2d::param_count(hidden, d, 1, 1, true)
}

/// Named size presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    S,
    B,
    L,
}

impl Variant {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_uppercase().as_str() {
            "S" => Ok(Variant::S),
            "B" => Ok(Variant::B),
            "L" => Ok(Variant::L),
            other => Err(config_err(format!("unknown variant {other:?}; expected S, B or L"))),
        }
    }

    /// Reference parameter budget at 224×224 input.
    pub fn target_params(self) -> usize {
        match self {
            Variant::S => 11_500_000,
            Variant::B => 24_600_000,
            Variant::L => 48_000_000,
        }
    }

    /// `(num_lik, num_gik)` per stage.
    pub fn depths(self) -> [(usize, usize); 4] {
        match self {
            Variant::S => [(2, 0), (2, 0), (4, 1), (2, 1)],
            Variant::B => [(2, 0), (2, 0), (6, 2), (2, 1)],
            Variant::L => [(2, 0), (4, 0), (8, 2), (4, 2)],
        }
    }
}

const BASE_DIMS: [usize; 4] = [64, 128, 256, 512];
const DIM_QUANTUM: usize = 16;

fn scaled_dim(base: usize, m: f64) -> usize {
    let q = (base as f64 * m / DIM_QUANTUM as f64).round() as usize;
    q.max(1) * DIM_QUANTUM
}

/// Builds a preset whose stage widths come from a width-multiplier scan.
///
/// Depths are fixed per variant. The multiplier runs over
/// `m = 0.25, 0.25 + 1/64, ..., 3.0`; each stage width is
/// `round(base·m / 16)·16` with base widths (64, 128, 256, 512), and the
/// candidate whose parameter count is closest to the variant's budget (first
/// one on ties) wins.
pub fn build_variant(variant: Variant, input_size: usize, num_classes: usize) -> Result<MedKanConfig> {
    let target = variant.target_params() as i64;
    let mut best: Option<(i64, MedKanConfig)> = None;
    for step in 0..=176 {
        let m = 0.25 + step as f64 / 64.0;
        let cfg = variant_at(variant, input_size, num_classes, m);
        let count = cfg.param_count()? as i64;
        let gap = (count - target).abs();
        if best.as_ref().map_or(true, |(g, _)| gap < *g) {
            best = Some((gap, cfg));
        }
    }
    Ok(best.expect("non-empty scan").1)
}

fn variant_at(variant: Variant, input_size: usize, num_classes: usize, m: f64) -> MedKanConfig {
    let stages = variant
        .depths()
        .iter()
        .zip(BASE_DIMS)
        .enumerate()
        .map(|(i, (&(num_lik, num_gik), base))| StageSpec {
            dim: scaled_dim(base, m),
            num_lik,
            num_gik,
            groups: 8,
            downsample: i > 0,
        })
        .collect();
    MedKanConfig {
        input_size,
        num_classes,
        stages,
        ..MedKanConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry_at_224() {
        let geo = MedKanConfig::default().validate().unwrap();
        assert_eq!(geo.stem, [112, 56]);
        assert_eq!(geo.stages, vec![56, 28, 14, 7]);
    }

    #[test]
    fn gik_token_limit_is_enforced() {
        let mut cfg = MedKanConfig::default();
        cfg.stages[1].num_gik = 1;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("token limit"), "{err}");
        cfg.global_mixer = GlobalMixerKind::None;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn odd_sides_are_rejected() {
        let cfg = MedKanConfig { input_size: 30, ..MedKanConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = MedKanConfig { input_size: 226, ..MedKanConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let err = serde_json::from_str::<MedKanConfig>(r#"{"input_sise": 28}"#);
        assert!(err.is_err());
        let cfg: MedKanConfig =
            serde_json::from_str(r#"{"input_size": 28, "local_block": "conv_next"}"#).unwrap();
        assert_eq!(cfg.local_block, LocalBlockKind::ConvNext);
    }
}
