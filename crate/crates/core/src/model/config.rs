use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsstrConfig {
    /// Number of progressive removal passes.
    pub iterations: usize,
    /// Width of the first encoder stage; deeper stages use 2x and 4x this.
    pub base_channels: usize,
    /// Dilation rates of the context-exploration branches.
    pub ce_dilations: Vec<usize>,
    /// Smoothing term of the adaptive fusion.
    pub epsilon: f64,
    /// Training/inference resolution as (height, width).
    pub input_size: (usize, usize),
    /// Fuse all iterations; when off the last iteration is the result.
    pub adaptive_fusion: bool,
}

impl Default for PsstrConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            base_channels: 32,
            ce_dilations: vec![1, 2, 3, 5],
            epsilon: 1e-8,
            input_size: (256, 256),
            adaptive_fusion: true,
        }
    }
}

/// Encoder kernel sizes, shallow to deep.
pub const ENCODER_KERNELS: [usize; 5] = [7, 5, 3, 3, 3];
/// Encoder strides; the product is the bottleneck reduction.
pub const ENCODER_STRIDES: [usize; 5] = [1, 2, 2, 1, 1];
const WIDTH_MULTIPLIERS: [usize; 5] = [1, 2, 4, 4, 4];

/// Spatial reduction between the input and the bottleneck.
pub const BOTTLENECK_STRIDE: usize = 4;

impl PsstrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if self.ce_dilations.is_empty() {
            return Err(Error::Config("ce_dilations must not be empty".into()));
        }
        if self.ce_dilations.windows(2).any(|w| w[0] >= w[1]) || self.ce_dilations[0] == 0 {
            return Err(Error::Config(
                "ce_dilations must be positive and strictly increasing".into(),
            ));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % BOTTLENECK_STRIDE != 0 || w % BOTTLENECK_STRIDE != 0 {
            return Err(Error::Config(format!(
                "input_size {h}x{w} must be positive and divisible by {BOTTLENECK_STRIDE}"
            )));
        }
        Ok(())
    }

    /// Channel width of each encoder stage.
    pub fn widths(&self) -> [usize; 5] {
        WIDTH_MULTIPLIERS.map(|m| m * self.base_channels)
    }
}
