//! Network definitions: residual-block generator, patch-level discriminator
//! and the frozen perceptual feature extractor, plus the checkpoint
//! container that serializes their named parameter collections.

pub mod checkpoint;
pub mod discriminator;
pub mod features;
pub mod generator;

pub use discriminator::{receptive_field, Discriminator};
pub use features::FeatureExtractor;
pub use generator::Generator;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub n_residual_blocks: usize,
    pub downsample_steps: usize,
    pub use_dropout: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            in_channels: 3,
            out_channels: 1,
            base_width: 64,
            n_residual_blocks: 9,
            downsample_steps: 2,
            use_dropout: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::Parameter(format!(
                "generator in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.out_channels != 1 && self.out_channels != 3 {
            return Err(Error::Parameter(format!(
                "generator out_channels must be 1 or 3, got {}",
                self.out_channels
            )));
        }
        if self.base_width == 0 {
            return Err(Error::Parameter("generator base_width must be >= 1".into()));
        }
        Ok(())
    }

    /// Channel count at the residual-block depth.
    pub fn bottleneck_width(&self) -> usize {
        self.base_width << self.downsample_steps
    }

    pub fn check_input_dims(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << self.downsample_steps;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Parameter(format!(
                "generator input {w}x{h} not divisible by 2^{} = {div}",
                self.downsample_steps
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Parameter("empty generator input".into()));
        }
        Ok(())
    }
}

/// Five convolution layers of kernel 4; leaky-ReLU (slope 0.2) after the
/// first four, sigmoid on the final one-channel map. Strides and widths are
/// the knobs that distinguish the patch-level default from the
/// whole-image ablation variant.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub strides: Vec<usize>,
    pub widths: Vec<usize>,
}

pub const DISC_LAYERS: usize = 5;
pub const DISC_KERNEL: usize = 4;
pub const DISC_LEAKY_SLOPE: f64 = 0.2;

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            strides: vec![2, 2, 2, 1, 1],
            widths: vec![64, 128, 256, 512, 1],
        }
    }
}

impl DiscriminatorConfig {
    /// Severe downsampling variant whose receptive field covers whole
    /// desk-scale images; stands in for a non-patch discriminator.
    pub fn whole_image() -> Self {
        DiscriminatorConfig {
            strides: vec![2, 2, 2, 2, 2],
            widths: vec![64, 128, 256, 512, 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.len() != DISC_LAYERS || self.widths.len() != DISC_LAYERS {
            return Err(Error::Parameter(format!(
                "discriminator takes exactly {DISC_LAYERS} strides and widths, got {} and {}",
                self.strides.len(),
                self.widths.len()
            )));
        }
        if self.widths[DISC_LAYERS - 1] != 1 {
            return Err(Error::Parameter(
                "discriminator final layer must map to one channel".into(),
            ));
        }
        if self.strides.iter().any(|&s| s == 0) || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Parameter(
                "discriminator strides and widths must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form output map size for a square input; `None` when the
    /// input is too small for the stack.
    pub fn score_map_size(&self, n: usize) -> Option<usize> {
        let mut n = n as isize;
        for &s in &self.strides {
            n = n + 2 - DISC_KERNEL as isize;
            if n < 0 {
                return None;
            }
            n = n / s as isize + 1;
        }
        Some(n as usize)
    }
}
