//! Architecture configuration, presets and shape planning.

use crate::autodiff::BnOptions;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct StemConfig {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
    /// Follow the stem with a 2×2 stride-2 average pool.
    pub pool: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseBlockConfig {
    pub layers: usize,
    pub growth: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub input_side: usize,
    pub input_channels: usize,
    pub stem: StemConfig,
    pub blocks: Vec<DenseBlockConfig>,
    /// Transition compression θ ∈ (0, 1].
    pub compression: f64,
    /// Width multiplier of a 1×1 bottleneck convolution inside each dense
    /// layer (`Some(4)` gives 4·k channels); `None` skips the bottleneck.
    pub bottleneck: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub widths: Vec<usize>,
    pub dropout: Vec<f64>,
    pub classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            widths: vec![512, 256],
            dropout: vec![0.5, 0.3],
            classes: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: String,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub cbam_ratio: usize,
    pub spatial_kernel: usize,
    pub bn: BnOptions,
}

pub const PRESETS: [&str; 2] = ["dense-tiny", "densenet121"];

impl ModelConfig {
    /// `dense-tiny`: 3×3 stem with 16 channels, three 4-layer blocks with
    /// growth 12, θ = 0.5, 64×64 inputs.
    pub fn dense_tiny() -> Self {
        ModelConfig {
            preset: "dense-tiny".into(),
            backbone: BackboneConfig {
                input_side: 64,
                input_channels: 3,
                stem: StemConfig {
                    kernel: 3,
                    channels: 16,
                    stride: 1,
                    pool: false,
                },
                blocks: vec![DenseBlockConfig { layers: 4, growth: 12 }; 3],
                compression: 0.5,
                bottleneck: None,
            },
            head: HeadConfig::default(),
            cbam_ratio: 8,
            spatial_kernel: 7,
            bn: BnOptions::default(),
        }
    }

    /// DenseNet-121 layout: blocks (6, 12, 24, 16), growth 32, bottleneck
    /// 4·k, 224×224 inputs, 7×7×1024 final feature map.
    pub fn densenet121() -> Self {
        ModelConfig {
            preset: "densenet121".into(),
            backbone: BackboneConfig {
                input_side: 224,
                input_channels: 3,
                stem: StemConfig {
                    kernel: 7,
                    channels: 64,
                    stride: 2,
                    pool: true,
                },
                blocks: [6, 12, 24, 16]
                    .into_iter()
                    .map(|layers| DenseBlockConfig { layers, growth: 32 })
                    .collect(),
                compression: 0.5,
                bottleneck: Some(4),
            },
            head: HeadConfig::default(),
            cbam_ratio: 8,
            spatial_kernel: 7,
            bn: BnOptions::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "dense-tiny" => Ok(Self::dense_tiny()),
            "densenet121" => Ok(Self::densenet121()),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset `{other}` (known: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Flat `key = value` view used by checkpoints and mismatch reports.
    pub fn to_fields(&self) -> Vec<(String, String)> {
        let b = &self.backbone;
        let list = |v: &[String]| v.join(",");
        let blocks: Vec<String> = b.blocks.iter().map(|d| format!("{}x{}", d.layers, d.growth)).collect();
        vec![
            ("preset".into(), self.preset.clone()),
            ("backbone.input_side".into(), b.input_side.to_string()),
            ("backbone.input_channels".into(), b.input_channels.to_string()),
            ("backbone.stem.kernel".into(), b.stem.kernel.to_string()),
            ("backbone.stem.channels".into(), b.stem.channels.to_string()),
            ("backbone.stem.stride".into(), b.stem.stride.to_string()),
            ("backbone.stem.pool".into(), b.stem.pool.to_string()),
            ("backbone.blocks".into(), list(&blocks)),
            ("backbone.compression".into(), format!("{:?}", b.compression)),
            (
                "backbone.bottleneck".into(),
                b.bottleneck.map_or("none".into(), |m| m.to_string()),
            ),
            (
                "head.widths".into(),
                list(&self.head.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>()),
            ),
            (
                "head.dropout".into(),
                list(&self.head.dropout.iter().map(|d| format!("{d:?}")).collect::<Vec<_>>()),
            ),
            ("head.classes".into(), self.head.classes.to_string()),
            ("cbam.ratio".into(), self.cbam_ratio.to_string()),
            ("cbam.spatial_kernel".into(), self.spatial_kernel.to_string()),
            ("bn.momentum".into(), format!("{:?}", self.bn.momentum)),
            ("bn.epsilon".into(), format!("{:?}", self.bn.epsilon)),
        ]
    }

    pub fn from_fields(fields: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            fields
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("config field `{key}` missing")))
        };
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidArgument(format!("config field `{key}` has bad value `{v}`")))
        }
        let n = |key: &str| -> Result<usize> { num(key, get(key)?) };
        let f = |key: &str| -> Result<f64> { num(key, get(key)?) };
        let blocks = get("backbone.blocks")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                let (l, k) = s
                    .split_once('x')
                    .ok_or_else(|| Error::InvalidArgument(format!("bad block spec `{s}`")))?;
                Ok(DenseBlockConfig {
                    layers: num("backbone.blocks", l)?,
                    growth: num("backbone.blocks", k)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let bottleneck = match get("backbone.bottleneck")? {
            "none" => None,
            v => Some(num("backbone.bottleneck", v)?),
        };
        let csv = |key: &str| -> Result<Vec<String>> {
            Ok(get(key)?.split(',').filter(|s| !s.is_empty()).map(str::to_owned).collect())
        };
        Ok(ModelConfig {
            preset: get("preset")?.to_owned(),
            backbone: BackboneConfig {
                input_side: n("backbone.input_side")?,
                input_channels: n("backbone.input_channels")?,
                stem: StemConfig {
                    kernel: n("backbone.stem.kernel")?,
                    channels: n("backbone.stem.channels")?,
                    stride: n("backbone.stem.stride")?,
                    pool: num("backbone.stem.pool", get("backbone.stem.pool")?)?,
                },
                blocks,
                compression: f("backbone.compression")?,
                bottleneck,
            },
            head: HeadConfig {
                widths: csv("head.widths")?
                    .iter()
                    .map(|v| num("head.widths", v))
                    .collect::<Result<_>>()?,
                dropout: csv("head.dropout")?
                    .iter()
                    .map(|v| num("head.dropout", v))
                    .collect::<Result<_>>()?,
                classes: n("head.classes")?,
            },
            cbam_ratio: n("cbam.ratio")?,
            spatial_kernel: n("cbam.spatial_kernel")?,
            bn: BnOptions {
                momentum: f("bn.momentum")?,
                epsilon: f("bn.epsilon")?,
            },
        })
    }

    /// First field where `other` differs, as (key, ours, theirs).
    pub fn first_difference(&self, other: &ModelConfig) -> Option<(String, String, String)> {
        self.to_fields()
            .into_iter()
            .zip(other.to_fields())
            .find(|(a, b)| a.1 != b.1)
            .map(|((k, a), (_, b))| (k, a, b))
    }
}

/// Extents of one stage of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub side: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Resolved spatial sizes and channel counts of every backbone stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackbonePlan {
    pub stem: StagePlan,
    pub blocks: Vec<StagePlan>,
    /// Transition after block `i` (all but the last block).
    pub transitions: Vec<StagePlan>,
    pub final_side: usize,
    pub final_channels: usize,
}

impl BackboneConfig {
    /// Channel and spatial bookkeeping. Fails on invalid settings or when the
    /// feature map would shrink below 1×1.
    pub fn plan(&self) -> Result<BackbonePlan> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidArgument("backbone needs at least one dense block".into()));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "compression {} outside (0, 1]",
                self.compression
            )));
        }
        if self.stem.kernel == 0 || self.stem.stride == 0 || self.stem.channels == 0 || self.input_side == 0 {
            return Err(Error::InvalidArgument("stem and input sizes must be positive".into()));
        }
        let collapse = |stage: &str, side: usize| {
            Error::InvalidArgument(format!(
                "spatial collapse: feature map is {side}×{side} at {stage}, needs ≥ 2 to pool"
            ))
        };
        let mut side = self.input_side.div_ceil(self.stem.stride);
        if self.stem.pool {
            if side < 2 {
                return Err(collapse("the stem pool", side));
            }
            side /= 2;
        }
        let stem = StagePlan {
            side,
            in_channels: self.input_channels,
            out_channels: self.stem.channels,
        };
        let mut channels = self.stem.channels;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let out = channels + block.layers * block.growth;
            blocks.push(StagePlan {
                side,
                in_channels: channels,
                out_channels: out,
            });
            channels = out;
            if i + 1 < self.blocks.len() {
                if side < 2 {
                    return Err(collapse(&format!("transition {}", i + 1), side));
                }
                let compressed = ((self.compression * channels as f64).floor() as usize).max(1);
                transitions.push(StagePlan {
                    side,
                    in_channels: channels,
                    out_channels: compressed,
                });
                channels = compressed;
                side /= 2;
            }
        }
        Ok(BackbonePlan {
            stem,
            blocks,
            transitions,
            final_side: side,
            final_channels: channels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_tiny_channel_arithmetic() {
        let plan = ModelConfig::dense_tiny().backbone.plan().unwrap();
        let chain: Vec<usize> = std::iter::once(plan.stem.out_channels)
            .chain(plan.blocks.iter().zip(plan.transitions.iter().map(Some).chain([None])).flat_map(
                |(b, t)| std::iter::once(b.out_channels).chain(t.map(|t| t.out_channels)),
            ))
            .collect();
        assert_eq!(chain, [16, 64, 32, 80, 40, 88]);
        assert_eq!((plan.final_side, plan.final_channels), (16, 88));
    }

    #[test]
    fn densenet121_final_map() {
        let plan = ModelConfig::densenet121().backbone.plan().unwrap();
        assert_eq!((plan.final_side, plan.final_channels), (7, 1024));
        let outs: Vec<usize> = plan.blocks.iter().map(|b| b.out_channels).collect();
        assert_eq!(outs, [256, 512, 1024, 1024]);
    }

    #[test]
    fn empty_block_keeps_width() {
        let mut cfg = ModelConfig::dense_tiny();
        cfg.backbone.blocks = vec![DenseBlockConfig { layers: 0, growth: 12 }];
        let plan = cfg.backbone.plan().unwrap();
        assert_eq!(plan.blocks[0].in_channels, plan.blocks[0].out_channels);
    }

    #[test]
    fn collapse_is_reported() {
        let mut cfg = ModelConfig::dense_tiny();
        cfg.backbone.input_side = 2;
        let err = cfg.backbone.plan().unwrap_err().to_string();
        assert!(err.contains("spatial collapse"), "{err}");
    }

    #[test]
    fn fields_round_trip_and_report_first_difference() {
        for cfg in [ModelConfig::dense_tiny(), ModelConfig::densenet121()] {
            assert_eq!(ModelConfig::from_fields(&cfg.to_fields()).unwrap(), cfg);
        }
        let a = ModelConfig::dense_tiny();
        let mut b = a.clone();
        b.backbone.compression = 0.25;
        b.head.classes = 4;
        let (field, ours, theirs) = a.first_difference(&b).unwrap();
        assert_eq!(field, "backbone.compression");
        assert_eq!((ours.as_str(), theirs.as_str()), ("0.5", "0.25"));
        assert!(ModelConfig::preset("resnet").is_err());
    }
}
