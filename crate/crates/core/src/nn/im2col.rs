//! Patch extraction as a differentiable custom op.
//!
//! A convolution on NHWC input is lowered to
//! `cols[b*ho*wo, k*k*c] x weight[co, k*k*c]^T`, so
//! the heavy lifting runs through the matmul kernel for the forward pass and
//! both gradients. `Im2Col` and `Col2Im` are each other's adjoint, which is all
//! the backward pass needs.

use candle_core::{CpuStorage, CustomOp1, Layout, Result, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl PatchGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    /// Calls `f(dst, src, len)` for every in-bounds run of taps. Input is
    /// NHWC, so one tap is `channels` contiguous values and with dilation 1 a
    /// whole kernel row is contiguous too.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, d, s, p) = (self.kernel, self.dilation, self.stride, self.padding);
        let (h, w, c) = (self.height as isize, self.width as isize, self.channels);
        let (ho, wo) = (self.out_height(), self.out_width());
        let rows = self.rows();
        for b in 0..self.batch {
            let image = b * self.height * self.width;
            for oy in 0..ho {
                for ox in 0..wo {
                    let dst = ((b * ho + oy) * wo + ox) * rows;
                    let y0 = (oy * s) as isize - p as isize;
                    let x0 = (ox * s) as isize - p as isize;
                    for ky in 0..k {
                        let iy = y0 + (ky * d) as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let pixel = |ix: isize| (image + iy as usize * self.width + ix as usize) * c;
                        let tap = dst + ky * k * c;
                        if d == 1 {
                            let lo = (-x0).clamp(0, k as isize) as usize;
                            let hi = (w - x0).clamp(0, k as isize) as usize;
                            if lo < hi {
                                f(tap + lo * c, pixel(x0 + lo as isize), (hi - lo) * c);
                            }
                        } else {
                            for kx in 0..k {
                                let ix = x0 + (kx * d) as isize;
                                if ix >= 0 && ix < w {
                                    f(tap + kx * c, pixel(ix), c);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Copy + Default>(&self, src: &[T]) -> Vec<T> {
        let mut dst = vec![T::default(); self.rows() * self.cols()];
        self.for_each_run(|o, i, n| dst[o..o + n].copy_from_slice(&src[i..i + n]));
        dst
    }

    fn col2im<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let mut dst = vec![T::default(); self.batch * self.channels * self.height * self.width];
        self.for_each_run(|o, i, n| {
            for (a, v) in dst[i..i + n].iter_mut().zip(&cols[o..o + n]) {
                *a += *v;
            }
        });
        dst
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("patch ops require contiguous input"),
    }
}

pub struct Im2Col(pub PatchGeometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let expected = [g.batch, g.height, g.width, g.channels];
        if layout.dims() != expected {
            candle_core::bail!("im2col: got {:?}, expected {:?}", layout.dims(), expected);
        }
        let shape = Shape::from((g.cols(), g.rows()));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(g.im2col(contiguous_slice(d, layout)?)),
            CpuStorage::F64(d) => CpuStorage::F64(g.im2col(contiguous_slice(d, layout)?)),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", candle_core::backend::BackendStorage::dtype(other)),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

pub struct Col2Im(pub PatchGeometry);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        if layout.dims() != [g.cols(), g.rows()] {
            candle_core::bail!("col2im: unexpected shape {:?}", layout.dims());
        }
        let shape = Shape::from((g.batch, g.height, g.width, g.channels));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(g.col2im(contiguous_slice(d, layout)?)),
            CpuStorage::F64(d) => CpuStorage::F64(g.col2im(contiguous_slice(d, layout)?)),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", candle_core::backend::BackendStorage::dtype(other)),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}
