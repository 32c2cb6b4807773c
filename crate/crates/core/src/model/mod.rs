//! The progressive text-removal network.
//!
//! One shared encoder feeds two branches. The segmentation branch positions
//! the remaining text, merges it with the running mask and corrects the
//! result; the removal branch decodes a text-free image. Each pass composites
//! the decoded image into the masked region of the original, and the passes
//! are finally fused by mask-weighted averaging.

mod composition;
pub mod config;
mod encoder;
mod removal;
mod segmentation;

use candle_core::{DType, Device, Tensor};

pub use composition::{adaptive_fuse, compose_region, fuse, merge_masks};
pub use config::PsstrConfig;
pub use encoder::{Encoder, STACK_CHANNELS};
pub use removal::RemovalDecoder;
pub use segmentation::{restore_scale, ContextExplore, MaskCorrector, RegionEstimate, TextRegionHead};

use crate::error::{shape_err, Result};
use crate::params::NamedParameterSet;

/// Quantities produced by one progressive pass.
#[derive(Clone, Debug)]
pub struct IterationState {
    /// 1-based pass number; 0 for the initial state.
    pub index: usize,
    /// Composited removal result of this pass.
    pub removed: Tensor,
    /// Corrected text mask.
    pub mask: Tensor,
    /// Text mask straight from the positioning head.
    pub mask_raw: Tensor,
    /// Maximum of `mask_raw` and the previous mask.
    pub mask_merged: Tensor,
}

impl IterationState {
    /// State before the first pass: the result is the input itself and the
    /// mask is empty.
    pub fn initial(i_in: &Tensor) -> Result<Self> {
        let (b, _, h, w) = i_in.dims4()?;
        let zeros = Tensor::zeros((b, 1, h, w), i_in.dtype(), i_in.device())?;
        Ok(Self {
            index: 0,
            removed: i_in.clone(),
            mask: zeros.clone(),
            mask_raw: zeros.clone(),
            mask_merged: zeros,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Final result, clamped to [0, 1].
    pub image: Tensor,
    /// Fused mask (the last pass's mask when fusion is off).
    pub mask: Tensor,
    pub states: Vec<IterationState>,
}

/// Validates an image batch: (B, 3, H, W), H and W divisible by 4, finite.
pub fn check_image(i_in: &Tensor) -> Result<()> {
    let dims = i_in.dims();
    if dims.len() != 4 || dims[1] != 3 {
        return Err(shape_err!("expected (batch, 3, H, W) image, got {:?}", dims));
    }
    let (h, w) = (dims[2], dims[3]);
    if h == 0 || w == 0 || h % config::BOTTLENECK_STRIDE != 0 || w % config::BOTTLENECK_STRIDE != 0 {
        return Err(shape_err!(
            "image size {h}x{w} must be divisible by {}",
            config::BOTTLENECK_STRIDE
        ));
    }
    let finite = i_in
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(shape_err!("image contains non-finite values"));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Psstrnet {
    cfg: PsstrConfig,
    encoder: Encoder,
    region_head: TextRegionHead,
    corrector: MaskCorrector,
    decoder: RemovalDecoder,
}

impl Psstrnet {
    /// Builds the network, creating (or reusing) its parameters in `params`.
    pub fn new(cfg: &PsstrConfig, params: &NamedParameterSet) -> Result<Self> {
        cfg.validate()?;
        let root = params.root();
        let deep = *cfg.widths().last().expect("five stages");
        Ok(Self {
            cfg: cfg.clone(),
            encoder: Encoder::new(cfg, &root.pp("encoder"))?,
            region_head: TextRegionHead::new(deep, &root.pp("segmentation").pp("region"))?,
            corrector: MaskCorrector::new(deep, &cfg.ce_dilations, &root.pp("segmentation").pp("update"))?,
            decoder: RemovalDecoder::new(cfg, &root.pp("removal"))?,
        })
    }

    /// Fresh parameters on the CPU from `seed`.
    pub fn init(cfg: &PsstrConfig, seed: u64) -> Result<(Self, NamedParameterSet)> {
        let params = NamedParameterSet::new(seed, DType::F32, &Device::Cpu);
        let net = Self::new(cfg, &params)?;
        Ok((net, params))
    }

    pub fn config(&self) -> &PsstrConfig {
        &self.cfg
    }

    /// Encodes the concatenation (I_in, I_prev, M_prev).
    pub fn encode(&self, stack: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        self.encoder.forward(stack, train)
    }

    /// Positions remaining text from the bottleneck (last) feature map.
    pub fn segment_text(&self, features: &[Tensor], train: bool) -> Result<RegionEstimate> {
        let bottleneck = features
            .last()
            .ok_or_else(|| shape_err!("segment_text needs encoder features"))?;
        self.region_head.forward(bottleneck, train)
    }

    pub fn correct_mask(&self, merged: &Tensor, features: &[Tensor], region: &RegionEstimate, train: bool) -> Result<Tensor> {
        let bottleneck = features
            .last()
            .ok_or_else(|| shape_err!("correct_mask needs encoder features"))?;
        self.corrector.forward(merged, bottleneck, &region.fused, train)
    }

    pub fn remove_text(&self, features: &[Tensor], train: bool) -> Result<Tensor> {
        self.decoder.forward(features, train)
    }

    /// One progressive pass.
    pub fn run_iteration(&self, prev: &IterationState, i_in: &Tensor, train: bool) -> Result<IterationState> {
        if prev.removed.dims() != i_in.dims() {
            return Err(shape_err!(
                "previous result {:?} does not match input {:?}",
                prev.removed.dims(),
                i_in.dims()
            ));
        }
        let stack = Tensor::cat(&[i_in, &prev.removed, &prev.mask], 1)?;
        let features = self.encode(&stack, train)?;
        let region = self.segment_text(&features, train)?;
        let merged = merge_masks(&region.mask, &prev.mask)?;
        let mask = self.correct_mask(&merged, &features, &region, train)?;
        let temp = self.remove_text(&features, train)?;
        let removed = compose_region(i_in, &temp, &mask)?;
        Ok(IterationState {
            index: prev.index + 1,
            removed,
            mask,
            mask_raw: region.mask,
            mask_merged: merged,
        })
    }

    /// Runs the configured passes and fusion.
    pub fn forward(&self, i_in: &Tensor, train: bool) -> Result<ForwardOutput> {
        self.forward_with(i_in, self.cfg.iterations, self.cfg.adaptive_fusion, train)
    }

    /// Like [`Psstrnet::forward`] with the pass count and fusion overridden.
    pub fn forward_with(&self, i_in: &Tensor, iterations: usize, fusion: bool, train: bool) -> Result<ForwardOutput> {
        check_image(i_in)?;
        if iterations == 0 {
            return Err(shape_err!("at least one iteration is required"));
        }
        let mut states = Vec::with_capacity(iterations);
        let mut state = IterationState::initial(i_in)?;
        for _ in 0..iterations {
            state = self.run_iteration(&state, i_in, train)?;
            states.push(state.clone());
        }
        let (image, mask) = if fusion {
            let (image, mask) = adaptive_fuse(&states, i_in, self.cfg.epsilon)?;
            (image.clamp(0.0, 1.0)?, mask)
        } else {
            (state.removed.clone(), state.mask.clone())
        };
        Ok(ForwardOutput { image, mask, states })
    }
}
