use candle_core::Tensor;

use crate::error::{shape_err, Result};
use crate::model::config::{PsstrConfig, BOTTLENECK_STRIDE, ENCODER_KERNELS, ENCODER_STRIDES};
use crate::nn::{ConvBnRelu, ConvSpec, ResBlock};
use crate::params::Scope;

/// Channels of the encoder input: image, previous result, previous mask.
pub const STACK_CHANNELS: usize = 7;

#[derive(Clone, Debug)]
struct EncoderStage {
    conv: ConvBnRelu,
    res: ResBlock,
}

/// Shared residual encoder: five conv/BN/ReLU/residual stages.
#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new(cfg: &PsstrConfig, scope: &Scope) -> Result<Self> {
        let widths = cfg.widths();
        let mut in_ch = STACK_CHANNELS;
        let mut stages = Vec::with_capacity(widths.len());
        for (i, &out_ch) in widths.iter().enumerate() {
            let s = scope.pp(format!("stage{i}"));
            let spec = ConvSpec::new(in_ch, out_ch, ENCODER_KERNELS[i]).stride(ENCODER_STRIDES[i]);
            stages.push(EncoderStage {
                conv: ConvBnRelu::new(spec, &s)?,
                res: ResBlock::new(out_ch, &s.pp("res"))?,
            });
            in_ch = out_ch;
        }
        Ok(Self { stages })
    }

    /// Returns one feature map per stage, shallow to deep.
    pub fn forward(&self, stack: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = stack.dims4()?;
        if c != STACK_CHANNELS {
            return Err(shape_err!("encoder expects {STACK_CHANNELS} channels, got {c}"));
        }
        if h % BOTTLENECK_STRIDE != 0 || w % BOTTLENECK_STRIDE != 0 {
            return Err(shape_err!("spatial size {h}x{w} not divisible by {BOTTLENECK_STRIDE}"));
        }
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut x = stack.clone();
        for stage in &self.stages {
            x = stage.res.forward(&stage.conv.forward(&x, train)?, train)?;
            feats.push(x.clone());
        }
        Ok(feats)
    }
}
