//! Mask merging, region composition and adaptive fusion.
//!
//! These are closed-form tensor expressions with no parameters; the network
//! wires them between its learned blocks.

use candle_core::Tensor;

use crate::error::{shape_err, Error, Result};
use crate::model::IterationState;

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("{what}: shapes {:?} and {:?} differ", a.dims(), b.dims()));
    }
    Ok(())
}

/// Checks that `mask` is (B,1,H,W) for an image of shape (B,C,H,W).
fn check_mask_for(image: &Tensor, mask: &Tensor, what: &str) -> Result<()> {
    let (b, _, h, w) = image.dims4()?;
    if mask.dims() != [b, 1, h, w] {
        return Err(shape_err!(
            "{what}: mask {:?} does not match image {:?}",
            mask.dims(),
            image.dims()
        ));
    }
    Ok(())
}

/// Pointwise maximum of the fresh mask and the running mask.
pub fn merge_masks(m_temp: &Tensor, m_prev: &Tensor) -> Result<Tensor> {
    check_same(m_temp, m_prev, "merge_masks")?;
    Ok(m_temp.maximum(m_prev)?)
}

/// Keeps `i_in` outside the mask and takes `i_temp` inside it:
/// `i_in * (1 - m) + i_temp * m`.
pub fn compose_region(i_in: &Tensor, i_temp: &Tensor, m: &Tensor) -> Result<Tensor> {
    check_same(i_in, i_temp, "compose_region")?;
    check_mask_for(i_in, m, "compose_region")?;
    let keep = m.affine(-1.0, 1.0)?;
    Ok((i_in.broadcast_mul(&keep)? + i_temp.broadcast_mul(m)?)?)
}

/// Mask-weighted average of per-iteration results, composited over the input.
///
/// With `n` iterations:
/// `M' = sum(M_i) / n`, `A = sum(I_i * M_i) / n`,
/// `I' = (A + eps) / (M' + eps)`, `out = I_in * (1 - M') + I' * M'`.
/// Returns `(out, M')` without clamping.
pub fn fuse(removed: &[Tensor], masks: &[Tensor], i_in: &Tensor, epsilon: f64) -> Result<(Tensor, Tensor)> {
    if removed.is_empty() {
        return Err(Error::Empty("adaptive fusion needs at least one iteration".into()));
    }
    if removed.len() != masks.len() {
        return Err(shape_err!(
            "adaptive fusion: {} results but {} masks",
            removed.len(),
            masks.len()
        ));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config("fusion epsilon must be > 0".into()));
    }
    let n = removed.len() as f64;
    let mut mask_sum: Option<Tensor> = None;
    let mut weighted_sum: Option<Tensor> = None;
    for (image, mask) in removed.iter().zip(masks) {
        check_same(i_in, image, "adaptive fusion")?;
        check_mask_for(i_in, mask, "adaptive fusion")?;
        let weighted = image.broadcast_mul(mask)?;
        mask_sum = Some(match mask_sum {
            Some(acc) => (acc + mask)?,
            None => mask.clone(),
        });
        weighted_sum = Some(match weighted_sum {
            Some(acc) => (acc + weighted)?,
            None => weighted,
        });
    }
    let mean_mask = (mask_sum.expect("non-empty") / n)?;
    let mean_weighted = (weighted_sum.expect("non-empty") / n)?;
    let normalized = (mean_weighted + epsilon)?.broadcast_div(&(&mean_mask + epsilon)?)?;
    let out = compose_region(i_in, &normalized, &mean_mask)?;
    Ok((out, mean_mask))
}

/// [`fuse`] over the states of a progressive run.
pub fn adaptive_fuse(states: &[IterationState], i_in: &Tensor, epsilon: f64) -> Result<(Tensor, Tensor)> {
    let removed: Vec<Tensor> = states.iter().map(|s| s.removed.clone()).collect();
    let masks: Vec<Tensor> = states.iter().map(|s| s.mask.clone()).collect();
    fuse(&removed, &masks, i_in, epsilon)
}
