//! Text segmentation branch: region positioning head, context exploration
//! and the mask-correcting half of the mask update.

use candle_core::Tensor;

use crate::error::{shape_err, Result};
use crate::model::config::BOTTLENECK_STRIDE;
use crate::nn::{self, BatchNorm, Conv2d, ConvBnRelu, ConvSpec};
use crate::params::{Init, Scope};

/// Upsamples a bottleneck-scale map to input scale with two x2 bilinear steps.
pub fn restore_scale(x: &Tensor) -> Result<Tensor> {
    nn::upsample2x(&nn::upsample2x(x)?)
}

/// Output of the region positioning head.
#[derive(Clone, Debug)]
pub struct RegionEstimate {
    /// Fused bottleneck feature the mask is projected from.
    pub fused: Tensor,
    /// Quarter-scale text probability.
    pub coarse: Tensor,
    /// Input-scale text probability.
    pub mask: Tensor,
}

/// Small conv head on the bottleneck producing a quarter-scale text mask.
#[derive(Clone, Debug)]
pub struct TextRegionHead {
    fuse: ConvBnRelu,
    out: Conv2d,
}

impl TextRegionHead {
    pub fn new(channels: usize, scope: &Scope) -> Result<Self> {
        Ok(Self {
            fuse: ConvBnRelu::new(ConvSpec::new(channels, channels, 3), &scope.pp("fuse"))?,
            out: Conv2d::new(ConvSpec::new(channels, 1, 1), &scope.pp("out"))?,
        })
    }

    pub fn forward(&self, bottleneck: &Tensor, train: bool) -> Result<RegionEstimate> {
        let fused = self.fuse.forward(bottleneck, train)?;
        let coarse = nn::sigmoid(&self.out.forward(&fused)?)?;
        let mask = restore_scale(&coarse)?;
        Ok(RegionEstimate { fused, coarse, mask })
    }
}

/// Parallel dilated 3x3 convolutions, concatenated and fused by a 1x1 conv.
/// Spatial size is preserved.
#[derive(Clone, Debug)]
pub struct ContextExplore {
    branches: Vec<ConvBnRelu>,
    fuse: ConvBnRelu,
}

impl ContextExplore {
    pub fn new(channels: usize, dilations: &[usize], scope: &Scope) -> Result<Self> {
        let branches = dilations
            .iter()
            .map(|&d| {
                ConvBnRelu::new(
                    ConvSpec::new(channels, channels, 3).dilation(d),
                    &scope.pp(format!("branch_d{d}")),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse = ConvBnRelu::new(
            ConvSpec::new(channels * dilations.len(), channels, 1),
            &scope.pp("fuse"),
        )?;
        Ok(Self { branches, fuse })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(x, train))
            .collect::<Result<Vec<_>>>()?;
        self.fuse.forward(&Tensor::cat(&outs, 1)?, train)
    }
}

/// Refines a merged mask by suppressing false-positive and restoring
/// false-negative evidence mined from the bottleneck features.
#[derive(Clone, Debug)]
pub struct MaskCorrector {
    false_positive: ContextExplore,
    false_negative: ContextExplore,
    suppress_norm: BatchNorm,
    restore_norm: BatchNorm,
    proj: Conv2d,
    alpha: Tensor,
    beta: Tensor,
}

impl MaskCorrector {
    pub fn new(channels: usize, dilations: &[usize], scope: &Scope) -> Result<Self> {
        Ok(Self {
            false_positive: ContextExplore::new(channels, dilations, &scope.pp("ce_fp"))?,
            false_negative: ContextExplore::new(channels, dilations, &scope.pp("ce_fn"))?,
            suppress_norm: BatchNorm::new(channels, &scope.pp("nr_fp"))?,
            restore_norm: BatchNorm::new(channels, &scope.pp("nr_fn"))?,
            proj: Conv2d::new(ConvSpec::new(channels, 1, 1), &scope.pp("proj"))?,
            alpha: scope.param(1, "alpha", Init::Const(1.0))?,
            beta: scope.param(1, "beta", Init::Const(1.0))?,
        })
    }

    /// `merged` is the input-scale merged mask, `features` the bottleneck
    /// feature map and `fused` the positioning head's fused feature.
    pub fn forward(&self, merged: &Tensor, features: &Tensor, fused: &Tensor, train: bool) -> Result<Tensor> {
        let (b, _, h, w) = features.dims4()?;
        let (mb, mc, mh, mw) = merged.dims4()?;
        if mb != b || mc != 1 || mh != h * BOTTLENECK_STRIDE || mw != w * BOTTLENECK_STRIDE {
            return Err(shape_err!(
                "mask {:?} does not align with features {:?}",
                merged.dims(),
                features.dims()
            ));
        }
        let m = nn::downsample_area(merged, BOTTLENECK_STRIDE)?;
        let text_attentive = features.broadcast_mul(&m)?;
        let background_attentive = features.broadcast_mul(&m.affine(-1.0, 1.0)?)?;
        let fp = self.false_positive.forward(&text_attentive, train)?;
        let fn_ = self.false_negative.forward(&background_attentive, train)?;
        let z = (fused - fp.broadcast_mul(&self.alpha)?)?;
        let z = self.suppress_norm.forward(&z, train)?.relu()?;
        let z = (z + fn_.broadcast_mul(&self.beta)?)?;
        let z = self.restore_norm.forward(&z, train)?.relu()?;
        restore_scale(&nn::sigmoid(&self.proj.forward(&z)?)?)
    }
}
