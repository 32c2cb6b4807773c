use candle_core::Tensor;

use crate::error::{shape_err, Result};
use crate::model::config::PsstrConfig;
use crate::nn::{self, Conv2d, ConvBnRelu, ConvSpec, ResBlock};
use crate::params::Scope;

#[derive(Clone, Debug)]
struct DecoderStage {
    conv: ConvBnRelu,
    res: ResBlock,
}

/// Residual U-Net decoder mirroring the encoder; emits the text-free image.
#[derive(Clone, Debug)]
pub struct RemovalDecoder {
    stages: Vec<DecoderStage>,
    head: Conv2d,
}

impl RemovalDecoder {
    pub fn new(cfg: &PsstrConfig, scope: &Scope) -> Result<Self> {
        let w = cfg.widths();
        let n = w.len();
        let mut stages = Vec::with_capacity(n);
        // Deepest stage sees the bottleneck alone; the rest get a skip.
        let mut in_ch = w[n - 1];
        for (i, skip) in (0..n).rev().enumerate() {
            let out_ch = if i == 0 { w[n - 1] } else { w[skip] };
            let s = scope.pp(format!("stage{i}"));
            stages.push(DecoderStage {
                conv: ConvBnRelu::new(ConvSpec::new(in_ch, out_ch, 3), &s)?,
                res: ResBlock::new(out_ch, &s.pp("res"))?,
            });
            if skip > 0 {
                in_ch = out_ch + w[skip - 1];
            }
        }
        let head = Conv2d::new(ConvSpec::new(w[0], 3, 1), &scope.pp("head"))?;
        Ok(Self { stages, head })
    }

    /// `features` ordered shallow to deep, as produced by the encoder.
    pub fn forward(&self, features: &[Tensor], train: bool) -> Result<Tensor> {
        if features.len() != self.stages.len() {
            return Err(shape_err!(
                "decoder expects {} feature maps, got {}",
                self.stages.len(),
                features.len()
            ));
        }
        let n = features.len();
        let mut x = features[n - 1].clone();
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                let skip = &features[n - 1 - i];
                let (_, _, sh, sw) = skip.dims4()?;
                let (_, _, h, _) = x.dims4()?;
                if h != sh {
                    x = nn::upsample2x(&x)?;
                }
                if x.dim(2)? != sh || x.dim(3)? != sw {
                    return Err(shape_err!("skip {:?} misaligned with {:?}", skip.dims(), x.dims()));
                }
                x = Tensor::cat(&[&x, skip], 1)?;
            }
            x = stage.res.forward(&stage.conv.forward(&x, train)?, train)?;
        }
        nn::sigmoid(&self.head.forward(&x)?)
    }
}
