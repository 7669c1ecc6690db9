//! Discrete architecture description and its validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DESCRIPTOR_DIM: usize = 64;
pub const DEFAULT_DOWNSAMPLE: usize = 8;
pub const DEFAULT_STEM_CHANNELS: usize = 32;
pub const DEFAULT_BLOCK_CHANNELS: usize = 32;
pub const DEFAULT_BLOCK_COUNT: usize = 3;
/// Descriptor dimensions covered by the dimensionality ablation.
pub const DESCRIPTOR_DIMS: [usize; 7] = [8, 16, 32, 64, 128, 256, 512];
pub const TEACHER_DESCRIPTOR_DIM: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    BatchNorm,
    Affine,
}

/// `Pwl` is `hardtanh(x, -1, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActKind {
    Relu,
    Pwl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    StandardConv,
    Residual,
    Bottleneck,
    /// Parallel 1x1 and kxk branches concatenated along channels.
    InceptionLike,
    /// Constant-zero output. Only meaningful as a search stub.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockChoice {
    pub kind: BlockKind,
    pub kernel: usize,
    pub channels: usize,
}

impl BlockChoice {
    pub const fn new(kind: BlockKind, kernel: usize, channels: usize) -> Self {
        BlockChoice { kind, kernel, channels }
    }

    pub fn label(&self) -> String {
        let kind = match self.kind {
            BlockKind::StandardConv => "conv",
            BlockKind::Residual => "residual",
            BlockKind::Bottleneck => "bottleneck",
            BlockKind::InceptionLike => "inception",
            BlockKind::Zero => "zero",
        };
        format!("{kind}{}x{}", self.kernel, self.channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub channels: usize,
    pub downsample_factor: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub stem: StemSpec,
    pub blocks: Vec<BlockChoice>,
    pub norm_kind: NormKind,
    pub act_kind: ActKind,
    pub descriptor_dim: usize,
    pub detector_upscale: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            stem: StemSpec {
                channels: DEFAULT_STEM_CHANNELS,
                downsample_factor: DEFAULT_DOWNSAMPLE,
            },
            blocks: vec![BlockChoice::new(BlockKind::StandardConv, 3, DEFAULT_BLOCK_CHANNELS); DEFAULT_BLOCK_COUNT],
            norm_kind: NormKind::Affine,
            act_kind: ActKind::Relu,
            descriptor_dim: DEFAULT_DESCRIPTOR_DIM,
            detector_upscale: DEFAULT_DOWNSAMPLE,
        }
    }
}

impl ArchSpec {
    pub fn with_kinds(norm_kind: NormKind, act_kind: ActKind) -> Self {
        ArchSpec { norm_kind, act_kind, ..Self::default() }
    }

    /// Number of stride-2 stem convolutions.
    pub fn stem_depth(&self) -> usize {
        self.stem.downsample_factor.trailing_zeros() as usize
    }

    /// Collects every violated invariant rather than stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        let s = self.stem.downsample_factor;
        if s < 2 || !s.is_power_of_two() {
            v.push(format!("stem.downsample_factor must be a power of two >= 2, got {s}"));
        }
        if self.stem.channels < 2 {
            v.push(format!("stem.channels must be >= 2, got {}", self.stem.channels));
        }
        if self.detector_upscale != s {
            v.push(format!(
                "detector_upscale ({}) must equal stem.downsample_factor ({s}) so the heatmap is at input resolution",
                self.detector_upscale
            ));
        }
        if self.descriptor_dim == 0 {
            v.push("descriptor_dim must be positive".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.kernel != 3 && b.kernel != 5 {
                v.push(format!("blocks[{i}].kernel must be 3 or 5, got {}", b.kernel));
            }
            if b.channels == 0 {
                v.push(format!("blocks[{i}].channels must be positive"));
            }
            if b.kind == BlockKind::InceptionLike && b.channels < 2 {
                v.push(format!("blocks[{i}]: inception block needs >= 2 channels to split across branches"));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(v))
        }
    }

    /// Channel count entering the heads.
    pub fn trunk_channels(&self) -> usize {
        self.blocks.last().map_or(self.stem.channels, |b| b.channels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ArchSpec::default().validate().unwrap();
        assert_eq!(ArchSpec::default().stem_depth(), 3);
    }

    #[test]
    fn validation_lists_every_violation() {
        let mut spec = ArchSpec::default();
        spec.detector_upscale = 4;
        spec.blocks[1].kernel = 7;
        match spec.validate() {
            Err(Error::InvalidSpec(v)) => {
                assert_eq!(v.len(), 2);
                assert!(v[0].contains("detector_upscale"));
                assert!(v[1].contains("blocks[1].kernel"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn json_round_trip() {
        let spec = ArchSpec::with_kinds(NormKind::BatchNorm, ActKind::Pwl);
        let s = serde_json::to_string(&spec).unwrap();
        assert!(s.contains("\"batch_norm\"") && s.contains("\"pwl\""));
        assert_eq!(serde_json::from_str::<ArchSpec>(&s).unwrap(), spec);
    }
}
