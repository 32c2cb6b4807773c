//! Training-mode batch normalization as one fused op. Composing it from
//! broadcasts makes every backward pass reduce over three axes, which is the
//! slowest reduction on the CPU backend.

use std::sync::{Arc, Mutex};

use candle_core::{CpuStorage, CustomOp3, DType, Layout, Result, Shape, Tensor, WithDType};

/// Per-channel batch mean and biased variance.
pub type ChannelStats = (Vec<f64>, Vec<f64>);

fn channel_stats<T: WithDType>(x: &[T], b: usize, c: usize, hw: usize) -> ChannelStats {
    let n = (b * hw) as f64;
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    for ci in 0..c {
        let planes = || (0..b).map(move |bi| (bi * c + ci) * hw);
        let s: f64 = planes().map(|o| x[o..o + hw].iter().map(|v| v.to_f64()).sum::<f64>()).sum();
        let m = s / n;
        let ss: f64 = planes()
            .map(|o| x[o..o + hw].iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>())
            .sum();
        mean[ci] = m;
        var[ci] = ss / n;
    }
    (mean, var)
}

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("batch norm requires contiguous input"),
    }
}

fn forward<T: WithDType>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    (b, c, hw): (usize, usize, usize),
    eps: f64,
) -> (Vec<T>, ChannelStats) {
    let (mean, var) = channel_stats(x, b, c, hw);
    let mut y = vec![T::zero(); x.len()];
    for ci in 0..c {
        let scale = gamma[ci].to_f64() / (var[ci] + eps).sqrt();
        let shift = beta[ci].to_f64() - mean[ci] * scale;
        for bi in 0..b {
            let o = (bi * c + ci) * hw;
            for (dst, src) in y[o..o + hw].iter_mut().zip(&x[o..o + hw]) {
                *dst = T::from_f64(src.to_f64() * scale + shift);
            }
        }
    }
    (y, (mean, var))
}

/// Normalizes with batch statistics and applies the affine transform.
/// The statistics of the last forward call are left in `stats`.
pub struct BatchNormTrain {
    pub eps: f64,
    pub stats: Arc<Mutex<Option<ChannelStats>>>,
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = match l1.dims() {
            [b, c, h, w] => (*b, *c, *h, *w),
            d => candle_core::bail!("batch norm expects NCHW, got {d:?}"),
        };
        if l2.dims() != [c] || l3.dims() != [c] {
            candle_core::bail!("batch norm parameters must have {c} elements");
        }
        let dims = (b, c, h * w);
        let (out, stats) = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(bt)) => {
                let (y, st) = forward(slice(x, l1)?, slice(g, l2)?, slice(bt, l3)?, dims, self.eps);
                (CpuStorage::F32(y), st)
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(bt)) => {
                let (y, st) = forward(slice(x, l1)?, slice(g, l2)?, slice(bt, l3)?, dims, self.eps);
                (CpuStorage::F64(y), st)
            }
            _ => candle_core::bail!("batch norm: unsupported or mixed dtypes"),
        };
        *self.stats.lock().expect("stats lock") = Some(stats);
        Ok((out, Shape::from(l1.dims())))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let hw = h * w;
        let n = (b * hw) as f64;
        let host = |t: &Tensor| -> Result<Vec<f64>> { t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>() };
        let (xs, gs, gam) = (host(x)?, host(grad)?, host(gamma)?);
        let (mean, var) = channel_stats(&xs, b, c, hw);
        let mut dx = vec![0f64; xs.len()];
        let mut dgamma = vec![0f64; c];
        let mut dbeta = vec![0f64; c];
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + self.eps).sqrt();
            let (mut sg, mut sgx) = (0f64, 0f64);
            for bi in 0..b {
                let o = (bi * c + ci) * hw;
                for i in o..o + hw {
                    sg += gs[i];
                    sgx += gs[i] * (xs[i] - mean[ci]) * inv;
                }
            }
            dbeta[ci] = sg;
            dgamma[ci] = sgx;
            let k = gam[ci] * inv / n;
            for bi in 0..b {
                let o = (bi * c + ci) * hw;
                for i in o..o + hw {
                    let xhat = (xs[i] - mean[ci]) * inv;
                    dx[i] = k * (n * gs[i] - sg - xhat * sgx);
                }
            }
        }
        let dev = x.device();
        let dx = Tensor::from_vec(dx, x.dims(), dev)?.to_dtype(x.dtype())?;
        let dgamma = Tensor::from_vec(dgamma, c, dev)?.to_dtype(gamma.dtype())?;
        let dbeta = Tensor::from_vec(dbeta, c, dev)?.to_dtype(gamma.dtype())?;
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}
