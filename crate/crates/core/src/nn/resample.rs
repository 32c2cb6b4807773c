//! x2 bilinear upsampling (half-pixel centres, clamped edges) and its adjoint
//! as custom ops. Each output sample is `0.75 * nearest + 0.25 * neighbour`
//! along both axes.

use candle_core::{CpuStorage, CustomOp1, Layout, Result, Shape, Tensor, WithDType};

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("resampling requires contiguous input"),
    }
}

fn dims4(layout: &Layout) -> Result<(usize, usize, usize)> {
    match layout.dims() {
        [b, c, h, w] => Ok((b * c, *h, *w)),
        d => candle_core::bail!("resampling expects NCHW, got {d:?}"),
    }
}

fn upsample<T: WithDType>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (near, far) = (T::from_f64(0.75), T::from_f64(0.25));
    let (h2, w2) = (2 * h, 2 * w);
    let mut rows = vec![T::zero(); h * w2];
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let x = &src[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let (r, o) = (&x[y * w..(y + 1) * w], &mut rows[y * w2..(y + 1) * w2]);
            for i in 0..w {
                let (l, rr) = (r[i.max(1) - 1], r[(i + 1).min(w - 1)]);
                o[2 * i] = near * r[i] + far * l;
                o[2 * i + 1] = near * r[i] + far * rr;
            }
        }
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h {
            let cur = &rows[y * w2..(y + 1) * w2];
            let prev = &rows[(y.max(1) - 1) * w2..][..w2];
            let next = &rows[(y + 1).min(h - 1) * w2..][..w2];
            for i in 0..w2 {
                dst[2 * y * w2 + i] = near * cur[i] + far * prev[i];
                dst[(2 * y + 1) * w2 + i] = near * cur[i] + far * next[i];
            }
        }
    }
    out
}

/// Transpose of [`upsample`]: `g` has shape (planes, 2h, 2w).
fn upsample_adjoint<T: WithDType>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (near, far) = (T::from_f64(0.75), T::from_f64(0.25));
    let (h2, w2) = (2 * h, 2 * w);
    let mut rows = vec![T::zero(); h * w2];
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let gp = &g[p * h2 * w2..(p + 1) * h2 * w2];
        rows.iter_mut().for_each(|v| *v = T::zero());
        for y in 0..h {
            let (prev, next) = (y.max(1) - 1, (y + 1).min(h - 1));
            for i in 0..w2 {
                let (even, odd) = (gp[2 * y * w2 + i], gp[(2 * y + 1) * w2 + i]);
                rows[y * w2 + i] += near * (even + odd);
                rows[prev * w2 + i] += far * even;
                rows[next * w2 + i] += far * odd;
            }
        }
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let r = &rows[y * w2..(y + 1) * w2];
            let o = &mut dst[y * w..(y + 1) * w];
            for i in 0..w {
                let (even, odd) = (r[2 * i], r[2 * i + 1]);
                o[i] += near * (even + odd);
                o[i.max(1) - 1] += far * even;
                o[(i + 1).min(w - 1)] += far * odd;
            }
        }
    }
    out
}

pub struct Upsample2x;

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (planes, h, w) = dims4(layout)?;
        let d = layout.dims();
        let shape = Shape::from((d[0], d[1], 2 * h, 2 * w));
        let out = match storage {
            CpuStorage::F32(s) => CpuStorage::F32(upsample(contiguous(s, layout)?, planes, h, w)),
            CpuStorage::F64(s) => CpuStorage::F64(upsample(contiguous(s, layout)?, planes, h, w)),
            _ => candle_core::bail!("upsample2x: unsupported dtype"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Upsample2xAdjoint)?))
    }
}

pub struct Upsample2xAdjoint;

impl CustomOp1 for Upsample2xAdjoint {
    fn name(&self) -> &'static str {
        "upsample2x-adjoint"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (planes, h2, w2) = dims4(layout)?;
        if h2 % 2 != 0 || w2 % 2 != 0 {
            candle_core::bail!("upsample2x-adjoint: odd size {h2}x{w2}");
        }
        let (h, w) = (h2 / 2, w2 / 2);
        let d = layout.dims();
        let shape = Shape::from((d[0], d[1], h, w));
        let out = match storage {
            CpuStorage::F32(s) => CpuStorage::F32(upsample_adjoint(contiguous(s, layout)?, planes, h, w)),
            CpuStorage::F64(s) => CpuStorage::F64(upsample_adjoint(contiguous(s, layout)?, planes, h, w)),
            _ => candle_core::bail!("upsample2x-adjoint: unsupported dtype"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Upsample2x)?))
    }
}
