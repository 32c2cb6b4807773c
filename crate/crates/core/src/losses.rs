//! Training objectives.
//!
//! All losses take the per-iteration composited outputs and sum over
//! iterations. Every L1 norm is reduced by the mean over its elements, so the
//! loss weights do not depend on resolution or batch size.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureExtractor;
use crate::error::{shape_err, Error, Result};

/// Additive smoothing in the dice ratio.
pub const DICE_SMOOTH: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the text-region L1 term.
    pub gamma_text: f64,
    /// Weight of the background L1 term.
    pub gamma_background: f64,
    /// Per-iteration dice weights.
    pub gamma_seg: Vec<f64>,
    pub style: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma_text: 50.0,
            gamma_background: 10.0,
            gamma_seg: vec![1.0, 2.0, 3.0],
            style: 200.0,
            perceptual: 0.1,
        }
    }
}

impl LossWeights {
    /// Default weights with the dice weight of iteration `i` set to `i`.
    pub fn for_iterations(n: usize) -> Self {
        Self {
            gamma_seg: (1..=n).map(|i| i as f64).collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self, iterations: usize) -> Result<()> {
        let scalars = [self.gamma_text, self.gamma_background, self.style, self.perceptual];
        if scalars.iter().chain(&self.gamma_seg).any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.gamma_seg.len() != iterations {
            return Err(Error::Config(format!(
                "{} dice weights for {iterations} iterations",
                self.gamma_seg.len()
            )));
        }
        Ok(())
    }
}

/// Scalar values of each loss term and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rc: f64,
    pub perceptual: f64,
    pub style: f64,
    pub seg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(rc: f64, perceptual: f64, style: f64, seg: f64, w: &LossWeights) -> Self {
        let total = w.style * style + w.perceptual * perceptual + rc + seg;
        Self {
            rc,
            perceptual,
            style,
            seg,
            total,
        }
    }
}

fn check_images(outs: &[Tensor], gt: &Tensor) -> Result<()> {
    if outs.is_empty() {
        return Err(Error::Empty("loss needs at least one iteration output".into()));
    }
    for o in outs {
        if o.dims() != gt.dims() {
            return Err(shape_err!("output {:?} does not match target {:?}", o.dims(), gt.dims()));
        }
    }
    Ok(())
}

fn check_mask(mask: &Tensor, image: &Tensor) -> Result<()> {
    let (b, _, h, w) = image.dims4()?;
    if mask.dims() != [b, 1, h, w] {
        return Err(shape_err!("mask {:?} does not match image {:?}", mask.dims(), image.dims()));
    }
    Ok(())
}

/// `sum_i g1 * mean|M (O_i - G)| + g2 * mean|(1 - M)(O_i - G)|`.
pub fn region_content_loss(outs: &[Tensor], gt: &Tensor, m_gt: &Tensor, w: &LossWeights) -> Result<Tensor> {
    check_images(outs, gt)?;
    check_mask(m_gt, gt)?;
    let background = m_gt.affine(-1.0, 1.0)?;
    let mut total: Option<Tensor> = None;
    for out in outs {
        let diff = (out - gt)?;
        let text = diff.broadcast_mul(m_gt)?.abs()?.mean_all()?;
        let rest = diff.broadcast_mul(&background)?.abs()?.mean_all()?;
        let term = ((text * w.gamma_text)? + (rest * w.gamma_background)?)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty outputs"))
}

/// Per-sample Gram matrices `X X^T / (C h w)` of an (B, C, h, w) map.
pub fn gram(f: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    let x = f.reshape((b, c, h * w))?;
    Ok((x.matmul(&x.t()?)? / (c * h * w) as f64)?)
}

/// Runs the backbone once over the target and all outputs stacked on the batch axis.
fn paired_features(outs: &[Tensor], gt: &Tensor, backbone: &FeatureExtractor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let batch = Tensor::cat(outs, 0)?;
    let out_feats = backbone.features(&batch)?;
    let gt_feats = backbone
        .features(&gt.detach())?
        .into_iter()
        .map(|f| f.repeat((outs.len(), 1, 1, 1)))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok((out_feats, gt_feats))
}

fn per_iteration_mean(diff: &Tensor, iterations: usize) -> Result<Tensor> {
    // Mean over everything but the stacked batch, summed over iterations.
    Ok((diff.mean_all()? * iterations as f64)?)
}

fn perceptual_from(out_feats: &[Tensor], gt_feats: &[Tensor], iterations: usize) -> Result<Tensor> {
    let mut total = Tensor::zeros((), out_feats[0].dtype(), out_feats[0].device())?;
    for (o, g) in out_feats.iter().zip(gt_feats) {
        total = (total + per_iteration_mean(&(o - g)?.abs()?, iterations)?)?;
    }
    Ok(total)
}

fn style_from(out_feats: &[Tensor], gt_feats: &[Tensor], iterations: usize) -> Result<Tensor> {
    let mut total = Tensor::zeros((), out_feats[0].dtype(), out_feats[0].device())?;
    for (o, g) in out_feats.iter().zip(gt_feats) {
        let d = (gram(o)? - gram(g)?)?.abs()?;
        total = (total + per_iteration_mean(&d, iterations)?)?;
    }
    Ok(total)
}

/// `sum_i sum_n mean|phi_n(O_i) - phi_n(G)|`.
pub fn perceptual_loss(outs: &[Tensor], gt: &Tensor, backbone: &FeatureExtractor) -> Result<Tensor> {
    check_images(outs, gt)?;
    let (o, g) = paired_features(outs, gt, backbone)?;
    perceptual_from(&o, &g, outs.len())
}

/// `sum_i sum_n mean|gram(phi_n(O_i)) - gram(phi_n(G))|`.
pub fn style_loss(outs: &[Tensor], gt: &Tensor, backbone: &FeatureExtractor) -> Result<Tensor> {
    check_images(outs, gt)?;
    let (o, g) = paired_features(outs, gt, backbone)?;
    style_from(&o, &g, outs.len())
}

/// `sum_i gamma_i * (1 - (2 sum(M_i G) + s) / (sum(M_i^2) + sum(G^2) + s))`,
/// sums over the whole batch.
pub fn dice_segmentation_loss(masks: &[Tensor], m_gt: &Tensor, w: &LossWeights) -> Result<Tensor> {
    if masks.is_empty() {
        return Err(Error::Empty("dice loss needs at least one mask".into()));
    }
    if masks.len() > w.gamma_seg.len() {
        return Err(Error::Config(format!(
            "{} masks but only {} dice weights",
            masks.len(),
            w.gamma_seg.len()
        )));
    }
    let gt_sq = m_gt.sqr()?.sum_all()?;
    let mut total: Option<Tensor> = None;
    for (mask, gamma) in masks.iter().zip(&w.gamma_seg) {
        if mask.dims() != m_gt.dims() {
            return Err(shape_err!("mask {:?} does not match target {:?}", mask.dims(), m_gt.dims()));
        }
        let inter = ((mask * m_gt)?.sum_all()? * 2.0)?;
        let denom = ((mask.sqr()?.sum_all()? + &gt_sq)? + DICE_SMOOTH)?;
        let dice = ((inter + DICE_SMOOTH)? / denom)?;
        let term = (dice.affine(-1.0, 1.0)? * *gamma)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty masks"))
}

/// Differentiable total plus the scalar breakdown.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Combines already-computed terms: `style_w * s + perc_w * p + rc + seg`.
pub fn total_loss(rc: &Tensor, perceptual: &Tensor, style: &Tensor, seg: &Tensor, w: &LossWeights) -> Result<LossOutput> {
    let total = ((((style * w.style)? + (perceptual * w.perceptual)?)? + rc)? + seg)?;
    let breakdown = LossBreakdown::new(scalar(rc)?, scalar(perceptual)?, scalar(style)?, scalar(seg)?, w);
    Ok(LossOutput { total, breakdown })
}

/// All four terms over one forward pass. The backbone runs once per call.
pub fn compute_losses(
    outs: &[Tensor],
    masks: &[Tensor],
    gt: &Tensor,
    m_gt: &Tensor,
    backbone: &FeatureExtractor,
    w: &LossWeights,
) -> Result<LossOutput> {
    check_images(outs, gt)?;
    let rc = region_content_loss(outs, gt, m_gt, w)?;
    let (o, g) = paired_features(outs, gt, backbone)?;
    let perceptual = perceptual_from(&o, &g, outs.len())?;
    let style = style_from(&o, &g, outs.len())?;
    let seg = dice_segmentation_loss(masks, m_gt, w)?;
    total_loss(&rc, &perceptual, &style, &seg, w)
}
