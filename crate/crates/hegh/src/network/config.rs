//! Architecture description and its validation.
//!
//! A network is eight convolutional stages (`layer1`..`layer8`), attention
//! blocks inserted after chosen stages, optional residual shortcuts around
//! chosen stages, and two linear heads (hash bits, class probabilities).
//! `NetworkConfig::plan` resolves all of it into concrete shapes once, so
//! every geometry problem is a construction-time error rather than a
//! forward-time surprise.

use std::collections::BTreeSet;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

pub const STAGE_COUNT: usize = 8;

/// Attention block hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CbamConfig {
    /// Bottleneck divisor of the channel-attention MLP.
    pub reduction_ratio: usize,
    /// Kernel size of the spatial-attention convolution; must be odd.
    pub spatial_kernel: usize,
    /// How many blocks to stack at each insertion point.
    pub stack_count: usize,
}

impl Default for CbamConfig {
    fn default() -> Self {
        CbamConfig { reduction_ratio: 4, spatial_kernel: 7, stack_count: 3 }
    }
}

/// One convolutional stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub channels: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn default_stride() -> usize {
    1
}

fn default_kernel() -> usize {
    3
}

impl LayerConfig {
    pub fn new(channels: usize, stride: usize) -> Self {
        LayerConfig { channels, stride, kernel: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Exactly eight stages, `layer1`..`layer8` in order.
    pub layers: Vec<LayerConfig>,
    /// Stage names that receive an attention stack after their activation.
    /// Accepts a single name or a list in JSON.
    #[serde(deserialize_with = "string_or_seq")]
    pub cbam_after: Vec<String>,
    pub cbam: CbamConfig,
    /// Stage names wrapped with a residual shortcut.
    pub shortcut_at: BTreeSet<String>,
    pub hash_bits: usize,
    pub num_classes: usize,
    /// Input height and width.
    pub input_size: [usize; 2],
    pub in_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            layers: vec![
                LayerConfig::new(32, 1),
                LayerConfig::new(32, 2),
                LayerConfig::new(64, 2),
                LayerConfig::new(64, 1),
                LayerConfig::new(128, 2),
                LayerConfig::new(128, 1),
                LayerConfig::new(128, 1),
                LayerConfig::new(128, 1),
            ],
            cbam_after: vec!["layer2".into()],
            cbam: CbamConfig::default(),
            shortcut_at: ["layer3", "layer4", "layer7", "layer8"]
                .into_iter()
                .map(String::from)
                .collect(),
            hash_bits: 12,
            num_classes: 10,
            input_size: [32, 32],
            in_channels: 3,
        }
    }
}

fn string_or_seq<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(String),
        Many(Vec<String>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    })
}

fn stage_index(name: &str) -> Option<usize> {
    let n = name.strip_prefix("layer")?.parse::<usize>().ok()?;
    (1..=STAGE_COUNT).contains(&n).then(|| n - 1)
}

pub fn stage_name(index: usize) -> String {
    format!("layer{}", index + 1)
}

/// How a stage's residual branch matches shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShortcutKind {
    /// Input added to the conv output unchanged.
    Identity,
    /// 1x1 convolution with the stage's stride, mapping `in_channels` to
    /// the stage width.
    Projection,
}

/// Resolved geometry for one stage.
#[derive(Debug, Clone)]
pub struct StagePlan {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub kernel: usize,
    pub padding: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub shortcut: Option<ShortcutKind>,
    /// Attention blocks stacked after this stage (0 when not a placement).
    pub cbam_blocks: usize,
}

/// Fully resolved architecture: per-stage geometry plus head fan-in.
#[derive(Debug, Clone)]
pub struct NetworkPlan {
    pub stages: Vec<StagePlan>,
    pub feature_channels: usize,
    pub hash_bits: usize,
    pub num_classes: usize,
}

fn conv_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl NetworkConfig {
    /// Parses a config from JSON and validates it in one step.
    pub fn from_json(json: &str) -> Result<Self> {
        let config: NetworkConfig = serde_json::from_str(json)?;
        config.plan()?;
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Validates the whole architecture and resolves every shape. Any
    /// geometry problem (spatial underflow, indivisible attention channels,
    /// unknown stage names) is reported here, before parameters exist.
    pub fn plan(&self) -> Result<NetworkPlan> {
        if self.layers.len() != STAGE_COUNT {
            return Err(Error::Config(format!(
                "expected {STAGE_COUNT} layers, got {}",
                self.layers.len()
            )));
        }
        if self.hash_bits == 0 {
            return Err(Error::Config("hash_bits must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        let [h0, w0] = self.input_size;
        if h0 < 16 || w0 < 16 {
            return Err(Error::Config(format!(
                "input_size must be at least 16x16, got {h0}x{w0}"
            )));
        }
        let cbam = &self.cbam;
        if cbam.reduction_ratio == 0 {
            return Err(Error::Config("cbam.reduction_ratio must be positive".into()));
        }
        if cbam.stack_count == 0 {
            return Err(Error::Config("cbam.stack_count must be positive".into()));
        }
        if cbam.spatial_kernel == 0 || cbam.spatial_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "cbam.spatial_kernel must be odd, got {}",
                cbam.spatial_kernel
            )));
        }

        let mut placements = vec![false; STAGE_COUNT];
        for name in &self.cbam_after {
            let idx = stage_index(name).ok_or_else(|| {
                Error::Config(format!("cbam_after names unknown stage '{name}'"))
            })?;
            if placements[idx] {
                return Err(Error::Config(format!("cbam_after lists '{name}' twice")));
            }
            placements[idx] = true;
        }
        let mut shortcuts = vec![false; STAGE_COUNT];
        for name in &self.shortcut_at {
            let idx = stage_index(name).ok_or_else(|| {
                Error::Config(format!("shortcut_at names unknown stage '{name}'"))
            })?;
            shortcuts[idx] = true;
        }

        let mut stages = Vec::with_capacity(STAGE_COUNT);
        let mut channels = self.in_channels;
        let mut hw = (h0, w0);
        for (i, layer) in self.layers.iter().enumerate() {
            let name = stage_name(i);
            if layer.channels == 0 {
                return Err(Error::Config(format!("{name}: channels must be positive")));
            }
            if layer.stride == 0 {
                return Err(Error::Config(format!("{name}: stride must be positive")));
            }
            if layer.kernel == 0 {
                return Err(Error::Config(format!("{name}: kernel must be positive")));
            }
            let padding = (layer.kernel - 1) / 2;
            let oh = conv_out(hw.0, layer.kernel, layer.stride, padding);
            let ow = conv_out(hw.1, layer.kernel, layer.stride, padding);
            let (Some(oh), Some(ow)) = (oh, ow) else {
                return Err(Error::Config(format!(
                    "{name}: kernel {k} does not fit the {h}x{w} feature map",
                    k = layer.kernel,
                    h = hw.0,
                    w = hw.1
                )));
            };
            // Same-size padding keeps every output extent at least 1, so
            // underflow shows up as a stride larger than the map it is
            // asked to downsample.
            if layer.stride > hw.0 || layer.stride > hw.1 {
                return Err(Error::Config(format!(
                    "{name}: stride {s} exceeds the {h}x{w} feature map; too much downsampling",
                    s = layer.stride,
                    h = hw.0,
                    w = hw.1
                )));
            }
            let shortcut = if shortcuts[i] {
                if channels == layer.channels && layer.stride == 1 {
                    Some(ShortcutKind::Identity)
                } else {
                    Some(ShortcutKind::Projection)
                }
            } else {
                None
            };
            let cbam_blocks = if placements[i] { cbam.stack_count } else { 0 };
            if cbam_blocks > 0 {
                if layer.channels % cbam.reduction_ratio != 0 {
                    return Err(Error::Config(format!(
                        "{name}: {} channels not divisible by reduction_ratio {}",
                        layer.channels, cbam.reduction_ratio
                    )));
                }
                if cbam.spatial_kernel > oh.min(ow) {
                    return Err(Error::Config(format!(
                        "{name}: spatial_kernel {} exceeds the {oh}x{ow} feature map",
                        cbam.spatial_kernel
                    )));
                }
            }
            stages.push(StagePlan {
                in_channels: channels,
                out_channels: layer.channels,
                stride: layer.stride,
                kernel: layer.kernel,
                padding,
                in_hw: hw,
                out_hw: (oh, ow),
                shortcut,
                cbam_blocks,
            });
            channels = layer.channels;
            hw = (oh, ow);
        }

        Ok(NetworkPlan {
            stages,
            feature_channels: channels,
            hash_bits: self.hash_bits,
            num_classes: self.num_classes,
        })
    }
}
