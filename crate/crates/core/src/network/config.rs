use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    /// 7×7 stride-2 convolution followed by 3×3 stride-2 max-pool.
    Conv7MaxPool,
    /// Single 3×3 stride-2 convolution.
    Conv3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputScale {
    Half,
    Full,
}

impl OutputScale {
    pub fn factor(self) -> usize {
        match self {
            OutputScale::Half => 2,
            OutputScale::Full => 1,
        }
    }
}

/// Declarative description of the encoder-decoder.
///
/// `decoder_features[0]` is the width of the 1×1 bottleneck convolution on
/// the encoder output; each further entry is one ×2 up-stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub stem: StemKind,
    pub stem_features: usize,
    pub growth_rate: usize,
    pub block_layout: Vec<usize>,
    pub compression: f64,
    pub decoder_features: Vec<usize>,
    pub output_scale: OutputScale,
    pub seed: u64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

pub const PRESETS: [&str; 2] = ["toy", "densenet121"];

impl NetworkConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(NetworkConfig::toy()),
            "densenet121" => Ok(NetworkConfig::densenet121()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected one of {PRESETS:?})"
            ))),
        }
    }

    /// DenseNet-121 encoder (64 stem features, growth 32, blocks 6/12/24/16)
    /// under a five-width decoder.
    pub fn densenet121() -> Self {
        NetworkConfig {
            input_channels: 3,
            stem: StemKind::Conv7MaxPool,
            stem_features: 64,
            growth_rate: 32,
            block_layout: vec![6, 12, 24, 16],
            compression: 0.5,
            decoder_features: vec![512, 256, 128, 64, 32],
            output_scale: OutputScale::Half,
            seed: 0,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }

    pub fn toy() -> Self {
        NetworkConfig {
            input_channels: 3,
            stem: StemKind::Conv3,
            stem_features: 8,
            growth_rate: 4,
            block_layout: vec![2, 2],
            compression: 0.5,
            decoder_features: vec![16, 8],
            output_scale: OutputScale::Half,
            seed: 0,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Downsampling factor of the stem alone.
    pub fn stem_factor(&self) -> usize {
        match self.stem {
            StemKind::Conv7MaxPool => 4,
            StemKind::Conv3 => 2,
        }
    }

    /// Total downsampling of the encoder; input extents must be multiples.
    pub fn encoder_factor(&self) -> usize {
        self.stem_factor() << self.block_layout.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("network: {m}")));
        if self.input_channels == 0 || self.stem_features == 0 || self.growth_rate == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.block_layout.is_empty() || self.block_layout.contains(&0) {
            return bad(format!("block_layout must be non-empty with counts >= 1, got {:?}", self.block_layout));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad(format!("compression must lie in (0, 1], got {}", self.compression));
        }
        if self.decoder_features.is_empty() || self.decoder_features.contains(&0) {
            return bad("decoder_features must be non-empty and positive".into());
        }
        if !(self.bn_epsilon > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("batch-norm epsilon must be positive and momentum in [0, 1]".into());
        }
        Ok(())
    }
}
