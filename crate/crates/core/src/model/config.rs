use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("config violates `{constraint}`: {detail}")]
    Constraint { constraint: &'static str, detail: String },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("unknown preset `{0}` (known: {known})", known = PRESET_NAMES.join(", "))]
    UnknownPreset(String),
}

fn violated(constraint: &'static str, detail: impl Into<String>) -> ConfigError {
    ConfigError::Constraint {
        constraint,
        detail: detail.into(),
    }
}

/// Canonical preset names, one per stage count.
pub const PRESET_NAMES: [&str; 4] = ["lapx-2s256", "lapx-3s208", "lapx-4s184", "lapx-5s160"];

pub const DEFAULT_PRESET: &str = "lapx-3s208";

fn d_pool_levels() -> usize {
    4
}
fn d_one() -> usize {
    1
}
fn d_nonlocal() -> Vec<usize> {
    vec![1, 3]
}
fn d_true() -> bool {
    true
}
fn d_sigma() -> f32 {
    2.0
}

/// Architectural recipe of a network. Stage indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_stages: usize,
    pub channels: usize,
    pub num_keypoints: usize,
    /// Input (height, width).
    pub input_hw: [usize; 2],
    #[serde(default = "d_pool_levels")]
    pub num_pool_levels: usize,
    /// Residual blocks before each pooling step of the encoder.
    #[serde(default = "d_one")]
    pub blocks_per_level: usize,
    /// Residual blocks on each skip branch.
    #[serde(default = "d_one")]
    pub skip_blocks: usize,
    /// Residual blocks appended to the stem at quarter resolution.
    #[serde(default)]
    pub stem_blocks: usize,
    #[serde(default = "d_nonlocal")]
    pub nonlocal_stages: Vec<usize>,
    #[serde(default = "d_true")]
    pub use_eca_cbam: bool,
    #[serde(default = "d_true")]
    pub use_stem_eca_cbam: bool,
    #[serde(default = "d_true")]
    pub use_soft_gate: bool,
    /// Gaussian std-dev of target heatmaps, in heatmap pixels.
    #[serde(default = "d_sigma")]
    pub heatmap_sigma: f32,
}

impl ModelConfig {
    /// Defaults for everything but the four required fields. Non-Local blocks
    /// go in stages 1 and 3 where those exist.
    pub fn new(num_stages: usize, channels: usize, num_keypoints: usize, input_hw: [usize; 2]) -> Self {
        Self {
            num_stages,
            channels,
            num_keypoints,
            input_hw,
            num_pool_levels: d_pool_levels(),
            blocks_per_level: 1,
            skip_blocks: 1,
            stem_blocks: 0,
            nonlocal_stages: d_nonlocal().into_iter().filter(|&s| s <= num_stages).collect(),
            use_eca_cbam: true,
            use_stem_eca_cbam: true,
            use_soft_gate: true,
            heatmap_sigma: d_sigma(),
        }
    }

    /// Named full-size configuration: 16 keypoints at 256×256.
    ///
    /// The four-stage preset needs a channel count divisible by 8, so it uses
    /// 184 channels with a shorter stem; `lapx-4s180` and `lapx-4s190` are
    /// accepted as aliases.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let (stages, channels, stem_blocks) = match name {
            "lapx-2s256" => (2, 256, 3),
            "lapx-3s208" => (3, 208, 3),
            "lapx-4s184" | "lapx-4s180" | "lapx-4s190" => (4, 184, 1),
            "lapx-5s160" => (5, 160, 3),
            _ => return Err(ConfigError::UnknownPreset(name.to_string())),
        };
        let mut cfg = Self::new(stages, channels, 16, [256, 256]);
        cfg.blocks_per_level = 2;
        cfg.skip_blocks = 1;
        cfg.stem_blocks = stem_blocks;
        Ok(cfg)
    }

    /// Small configuration for desk-scale training: 8 keypoints at 64×64,
    /// two pooling levels so the bottleneck is 4×4.
    pub fn toy(num_stages: usize, channels: usize) -> Self {
        let mut cfg = Self::new(num_stages, channels, 8, [64, 64]);
        cfg.num_pool_levels = 2;
        cfg
    }

    pub fn heatmap_hw(&self) -> [usize; 2] {
        [self.input_hw[0] / 4, self.input_hw[1] / 4]
    }

    /// Spatial extent at the hourglass bottleneck.
    pub fn neck_hw(&self) -> [usize; 2] {
        let [h, w] = self.heatmap_hw();
        [h >> self.num_pool_levels, w >> self.num_pool_levels]
    }

    pub fn has_nonlocal(&self, stage: usize) -> bool {
        self.nonlocal_stages.contains(&stage)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_stages == 0 {
            return Err(violated("num_stages >= 1", "got 0"));
        }
        if self.num_keypoints == 0 {
            return Err(violated("num_keypoints >= 1", "got 0"));
        }
        if self.channels < 2 || !self.channels.is_multiple_of(2) {
            return Err(violated("channels even and >= 2", format!("got {}", self.channels)));
        }
        if !self.nonlocal_stages.is_empty() && !self.channels.is_multiple_of(8) {
            return Err(violated(
                "channels divisible by 8 when Non-Local is enabled",
                format!("got {}", self.channels),
            ));
        }
        if self.input_hw.iter().any(|&d| d == 0 || d % 4 != 0) {
            return Err(violated("input_hw divisible by 4", format!("got {:?}", self.input_hw)));
        }
        let levels = self.num_pool_levels;
        if levels >= usize::BITS as usize {
            return Err(violated("num_pool_levels fits the input", format!("got {levels}")));
        }
        let hm = self.heatmap_hw();
        if hm.iter().any(|&d| d % (1 << levels) != 0) {
            return Err(violated(
                "input_hw / 4 divisible by 2^num_pool_levels",
                format!("heatmap {hm:?}, {levels} pool levels"),
            ));
        }
        for &s in &self.nonlocal_stages {
            if s == 0 || s > self.num_stages {
                return Err(violated(
                    "nonlocal_stages within 1..=num_stages",
                    format!("stage {s} of {}", self.num_stages),
                ));
            }
        }
        if !(self.heatmap_sigma.is_finite() && self.heatmap_sigma > 0.0) {
            return Err(violated("heatmap_sigma > 0", format!("got {}", self.heatmap_sigma)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
