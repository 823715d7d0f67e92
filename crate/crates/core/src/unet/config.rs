use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};
use crate::nn::NormScope;

/// Channel widths of the reference architectures, first down block.
pub const REFERENCE_BASE: usize = 192;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownBlockSpec {
    pub channels: usize,
    /// Average-pool factor applied after the block's ResBlocks.
    pub pool_stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpBlockSpec {
    pub channels: usize,
    /// Nearest-neighbour factor applied before the block's ResBlocks.
    pub upsample: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Small,
    Medium,
    Large,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Small => "small",
            Preset::Medium => "medium",
            Preset::Large => "large",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "small" => Some(Preset::Small),
            "medium" => Some(Preset::Medium),
            "large" => Some(Preset::Large),
            _ => None,
        }
    }

    /// `(channel multiple of base, pool stride)` per down block.
    fn layout(self) -> &'static [(usize, usize)] {
        match self {
            Preset::Small => &[(1, 2), (2, 2)],
            Preset::Medium => &[(1, 2), (2, 2), (4, 2)],
            // Block resolutions 256 -> 128 -> 64 -> 16 need the x4 pool third.
            Preset::Large => &[(1, 2), (2, 2), (4, 4), (8, 2)],
        }
    }

    pub fn config(self, n_total: usize, resolution: usize, base_channels: usize) -> Result<UNetConfig> {
        let down: Vec<DownBlockSpec> = self
            .layout()
            .iter()
            .map(|&(mult, pool_stride)| DownBlockSpec {
                channels: base_channels * mult,
                pool_stride,
            })
            .collect();
        let cfg = UNetConfig {
            input_resolution: resolution,
            in_channels: n_total,
            base_channels,
            up_blocks: mirror(&down),
            down_blocks: down,
            res_blocks: 2,
            norm_groups: 16,
            norm_scope: NormScope::Local,
            activation: Activation::Silu,
            time_embed_dim: 4 * base_channels,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Up path for a down path: reversed, half the channels, same factors.
pub fn mirror(down: &[DownBlockSpec]) -> Vec<UpBlockSpec> {
    down.iter()
        .rev()
        .map(|d| UpBlockSpec {
            channels: d.channels / 2,
            upsample: d.pool_stride,
        })
        .collect()
}

pub fn large_preset(n_total: usize, resolution: usize) -> Result<UNetConfig> {
    Preset::Large.config(n_total, resolution, REFERENCE_BASE)
}

pub fn medium_preset(n_total: usize, resolution: usize) -> Result<UNetConfig> {
    Preset::Medium.config(n_total, resolution, REFERENCE_BASE)
}

pub fn small_preset(n_total: usize, resolution: usize) -> Result<UNetConfig> {
    Preset::Small.config(n_total, resolution, REFERENCE_BASE)
}

/// Declarative U-Net description: stride-1 3x3 convs, average pooling,
/// nearest upsampling, concatenated skips, no global operations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub input_resolution: usize,
    /// `n_defect + 3`; also the output width.
    pub in_channels: usize,
    /// Output width of the input convolution.
    pub base_channels: usize,
    pub down_blocks: Vec<DownBlockSpec>,
    pub up_blocks: Vec<UpBlockSpec>,
    /// ResBlocks per down/up block.
    pub res_blocks: usize,
    /// Upper bound on GroupNorm groups.
    pub norm_groups: usize,
    pub norm_scope: NormScope,
    pub activation: Activation,
    pub time_embed_dim: usize,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(config_err("channel counts must be positive"));
        }
        if self.down_blocks.is_empty() {
            return Err(config_err("at least one down block is required"));
        }
        if self.res_blocks == 0 {
            return Err(config_err("res_blocks must be at least 1"));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(config_err("time_embed_dim must be even and >= 2"));
        }
        if self.norm_groups == 0 {
            return Err(config_err("norm_groups must be positive"));
        }
        for d in &self.down_blocks {
            if d.channels == 0 || d.pool_stride == 0 {
                return Err(config_err("down block channels and pool stride must be positive"));
            }
        }
        if self.up_blocks != mirror(&self.down_blocks) {
            return Err(config_err(
                "up blocks must mirror down blocks (reversed order, half channels, same factors)",
            ));
        }
        if self.up_blocks.iter().any(|u| u.channels == 0) {
            return Err(config_err("down block channels must be at least 2"));
        }
        let factor = self.pool_factor();
        if self.input_resolution == 0 || !self.input_resolution.is_multiple_of(factor) {
            return Err(config_err(format!(
                "resolution {} is not divisible by total pool factor {factor}",
                self.input_resolution
            )));
        }
        Ok(())
    }

    /// Product of all pool strides.
    pub fn pool_factor(&self) -> usize {
        self.down_blocks.iter().map(|d| d.pool_stride).product()
    }

    /// Resolution at which each down block's ResBlocks run.
    pub fn block_resolutions(&self) -> Vec<usize> {
        let mut r = self.input_resolution;
        self.down_blocks
            .iter()
            .map(|d| {
                let here = r;
                r /= d.pool_stride;
                here
            })
            .collect()
    }

    pub fn up_resolutions(&self) -> Vec<usize> {
        let mut v = self.block_resolutions();
        v.reverse();
        v
    }

    pub fn with_resolution(&self, resolution: usize) -> Result<Self> {
        let mut c = self.clone();
        c.input_resolution = resolution;
        c.validate()?;
        Ok(c)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn arch_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Group count for a norm over `channels`: the largest divisor not above
/// `cap`. Local norms also keep at least 8 channels per group (or all of
/// them when fewer exist) so per-pixel statistics stay informative.
pub fn norm_groups_for(channels: usize, cap: usize, scope: NormScope) -> usize {
    let min_group = match scope {
        NormScope::Local => channels.min(8),
        NormScope::Global => 1,
    };
    (1..=cap.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g) && channels / g >= min_group)
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_preset_matches_reference_table() {
        let c = large_preset(4, 256).unwrap();
        assert_eq!(c.block_resolutions(), vec![256, 128, 64, 16]);
        let ch: Vec<usize> = c.down_blocks.iter().map(|d| d.channels).collect();
        assert_eq!(ch, vec![192, 384, 768, 1536]);
        let up: Vec<usize> = c.up_blocks.iter().map(|u| u.channels).collect();
        assert_eq!(up, vec![768, 384, 192, 96]);
        assert_eq!(c.up_resolutions(), vec![16, 64, 128, 256]);
        assert_eq!(c.in_channels, 4);
        assert_eq!(c.pool_factor(), 32);
    }

    #[test]
    fn wider_input_keeps_topology() {
        let a = large_preset(4, 256).unwrap();
        let b = large_preset(8, 256).unwrap();
        assert_eq!(b.in_channels, 8);
        assert_eq!(a.down_blocks, b.down_blocks);
        assert_eq!(a.up_blocks, b.up_blocks);
    }

    #[test]
    fn indivisible_resolution_is_rejected() {
        assert!(large_preset(4, 100).is_err());
        assert!(small_preset(4, 102).is_err());
    }

    #[test]
    fn small_and_medium_presets() {
        let s = small_preset(4, 256).unwrap();
        assert_eq!(s.block_resolutions(), vec![256, 128]);
        let ch: Vec<usize> = s.down_blocks.iter().map(|d| d.channels).collect();
        assert_eq!(ch, vec![192, 384]);
        let up: Vec<usize> = s.up_blocks.iter().map(|u| u.channels).collect();
        assert_eq!(up, vec![192, 96]);
        let m = medium_preset(4, 256).unwrap();
        assert_eq!(m.down_blocks.len(), 3);
        assert_eq!(m.down_blocks.last().unwrap().channels, 768);
    }

    #[test]
    fn non_mirrored_up_path_is_rejected() {
        let mut c = small_preset(4, 64).unwrap();
        c.up_blocks[0].channels += 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn six_block_variant_is_constructible() {
        let down: Vec<DownBlockSpec> = (0..6)
            .map(|i| DownBlockSpec {
                channels: 8 << i.min(3),
                pool_stride: 2,
            })
            .collect();
        let mut c = small_preset(5, 64).unwrap();
        c.base_channels = 8;
        c.up_blocks = mirror(&down);
        c.down_blocks = down;
        assert!(c.validate().is_ok());
        assert_eq!(c.pool_factor(), 64);
    }

    #[test]
    fn group_counts() {
        assert_eq!(norm_groups_for(192, 16, NormScope::Global), 16);
        assert_eq!(norm_groups_for(96, 16, NormScope::Global), 16);
        assert_eq!(norm_groups_for(16, 16, NormScope::Local), 2);
        assert_eq!(norm_groups_for(8, 16, NormScope::Local), 1);
        assert_eq!(norm_groups_for(192, 16, NormScope::Local), 16);
        assert_eq!(norm_groups_for(5, 16, NormScope::Local), 1);
    }

    #[test]
    fn arch_hash_tracks_config() {
        let a = small_preset(4, 64).unwrap();
        let mut b = a.clone();
        assert_eq!(a.arch_hash(), b.arch_hash());
        b.in_channels = 5;
        assert_ne!(a.arch_hash(), b.arch_hash());
    }
}
