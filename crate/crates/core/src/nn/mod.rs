//! Layers and tensor helpers shared by the network, the backbone and the losses.

mod batchnorm;
mod im2col;
mod resample;

pub use batchnorm::BatchNormTrain;
pub use im2col::{Col2Im, Im2Col, PatchGeometry};
pub use resample::{Upsample2x, Upsample2xAdjoint};

use std::sync::{Arc, Mutex};

use candle_core::{Tensor, Var};

use crate::error::{shape_err, Result};
use crate::params::{Init, Scope};

/// 2-D cross-correlation on NCHW input with an OIHW kernel.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (co, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 {
        return Err(shape_err!(
            "conv2d: input {:?} incompatible with kernel {:?}",
            x.dims(),
            weight.dims()
        ));
    }
    if h + 2 * padding < dilation * (k - 1) + 1 || w + 2 * padding < dilation * (k - 1) + 1 {
        return Err(shape_err!("conv2d: input {:?} smaller than kernel", x.dims()));
    }
    let geom = PatchGeometry {
        batch: b,
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
        dilation,
    };
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let nhwc = x.permute((0, 2, 3, 1))?;
    let cols = if k == 1 && stride == 1 && padding == 0 {
        nhwc.reshape((b * h * w, c))?
    } else {
        nhwc.contiguous()?.apply_op1(Im2Col(geom))?
    };
    let weight = weight.permute((0, 2, 3, 1))?.reshape((co, k * k * c))?;
    let y = cols.matmul(&weight.t()?)?;
    let y = match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((1, co))?)?,
        None => y,
    };
    Ok(y.reshape((b, ho, wo, co))?.permute((0, 3, 1, 2))?.contiguous()?)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            dilation: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

/// Convolution with "same" padding for odd kernels.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Conv2d {
    pub fn new(spec: ConvSpec, scope: &Scope) -> Result<Self> {
        let weight = scope.param(
            (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel),
            "weight",
            Init::KaimingNormal,
        )?;
        let bias = if spec.bias {
            Some(scope.param(spec.out_channels, "bias", Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.dilation * (spec.kernel / 2),
            dilation: spec.dilation,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(
            x,
            &self.weight,
            self.bias.as_ref(),
            self.stride,
            self.padding,
            self.dilation,
        )
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

/// Spatial batch normalization with running statistics kept as buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(channels: usize, scope: &Scope) -> Result<Self> {
        Ok(Self {
            weight: scope.param(channels, "weight", Init::Const(1.0))?,
            bias: scope.param(channels, "bias", Init::Const(0.0))?,
            running_mean: scope.buffer(channels, "running_mean", Init::Const(0.0))?,
            running_var: scope.buffer(channels, "running_var", Init::Const(1.0))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if train {
            let stats = Arc::new(Mutex::new(None));
            let op = BatchNormTrain { eps: self.eps, stats: stats.clone() };
            let y = x.contiguous()?.apply_op3(&self.weight, &self.bias, op)?;
            let (mean, var) = stats.lock().expect("stats lock").take().expect("stats set by forward");
            let n = (b * h * w) as f64;
            let m = self.momentum;
            let dtype = self.running_mean.dtype();
            let mean = Tensor::from_vec(mean, c, x.device())?.to_dtype(dtype)?;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean * m)?)?;
            self.running_mean.set(&new_mean)?;
            if n > 1.0 {
                let unbiased = Tensor::from_vec(var, c, x.device())?.to_dtype(dtype)?;
                let unbiased = (unbiased * (n / (n - 1.0)))?;
                let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
                self.running_var.set(&new_var)?;
            }
            return Ok(y);
        }
        let stat_shape = (1, c, 1, 1);
        let mean = self.running_mean.as_detached_tensor().reshape(stat_shape)?;
        let var = self.running_var.as_detached_tensor().reshape(stat_shape)?;
        let scale = self
            .weight
            .reshape(stat_shape)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&scale)?;
        Ok(y.broadcast_add(&self.bias.reshape(stat_shape)?)?)
    }
}

/// conv -> batch-norm -> ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(spec: ConvSpec, scope: &Scope) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(spec.no_bias(), &scope.pp("conv"))?,
            bn: BatchNorm::new(spec.out_channels, &scope.pp("bn"))?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, train)?.relu()?)
    }
}

/// Two 3x3 conv/BN pairs with an identity shortcut.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
}

impl ResBlock {
    pub fn new(channels: usize, scope: &Scope) -> Result<Self> {
        let spec = ConvSpec::new(channels, channels, 3).no_bias();
        Ok(Self {
            conv1: Conv2d::new(spec, &scope.pp("conv1"))?,
            bn1: BatchNorm::new(channels, &scope.pp("bn1"))?,
            conv2: Conv2d::new(spec, &scope.pp("conv2"))?,
            bn2: BatchNorm::new(channels, &scope.pp("bn2"))?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?;
        Ok((y + x)?.relu()?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// x2 bilinear upsampling of an NCHW tensor (align-corners off).
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    x.dims4()?;
    Ok(x.contiguous()?.apply_op1(Upsample2x)?)
}

/// Area-average downsampling by an integer factor.
pub fn downsample_area(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % factor != 0 || w % factor != 0 {
        return Err(shape_err!(
            "area downsampling by {factor} needs divisible size, got {:?}",
            x.dims()
        ));
    }
    Ok(x.reshape((b, c, h / factor, factor, w / factor, factor))?
        .mean(5)?
        .mean(3)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    use crate::params::NamedParameterSet;

    /// Direct-loop cross-correlation used as a reference.
    fn naive_conv(
        x: &[f64],
        xd: (usize, usize, usize, usize),
        w: &[f64],
        wd: (usize, usize, usize),
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> (Vec<f64>, usize, usize) {
        let (b, c, h, wi) = xd;
        let (co, _, k) = wd;
        let ho = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
        let wo = (wi + 2 * pad - dil * (k - 1) - 1) / stride + 1;
        let mut out = vec![0.0; b * co * ho * wo];
        for bi in 0..b {
            for o in 0..co {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky * dil) as isize - pad as isize;
                                    let ix = (xx * stride + kx * dil) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wi {
                                        s += x[((bi * c + ci) * h + iy as usize) * wi + ix as usize]
                                            * w[((o * c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((bi * co + o) * ho + y) * wo + xx] = s;
                    }
                }
            }
        }
        (out, ho, wo)
    }

    #[test]
    fn conv_matches_direct_loops() {
        let dev = Device::Cpu;
        for &(stride, pad, dil, k) in &[(1, 1, 1, 3), (2, 2, 1, 5), (1, 5, 5, 3), (2, 3, 1, 7), (1, 0, 1, 1)] {
            let x = Tensor::randn(0f64, 1.0, (2, 3, 9, 10), &dev).unwrap();
            let w = Tensor::randn(0f64, 1.0, (4, 3, k, k), &dev).unwrap();
            let got = conv2d(&x, &w, None, stride, pad, dil).unwrap();
            let (want, ho, wo) = naive_conv(
                &x.flatten_all().unwrap().to_vec1().unwrap(),
                (2, 3, 9, 10),
                &w.flatten_all().unwrap().to_vec1().unwrap(),
                (4, 3, k),
                stride,
                pad,
                dil,
            );
            assert_eq!(got.dims(), &[2, 4, ho, wo]);
            let got: Vec<f64> = got.flatten_all().unwrap().to_vec1().unwrap();
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 1.0, (1, 2, 6, 6), &dev).unwrap();
        let w = Var::randn(0f64, 1.0, (3, 2, 3, 3), &dev).unwrap();
        let loss = |x: &Tensor, w: &Tensor| -> f64 {
            conv2d(x, w, None, 2, 2, 2)
                .unwrap()
                .sqr()
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar()
                .unwrap()
        };
        let y = conv2d(x.as_tensor(), w.as_tensor(), None, 2, 2, 2).unwrap();
        let grads = y.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        for var in [&x, &w] {
            let g: Vec<f64> = grads.get(var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let base: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
            for i in (0..base.len()).step_by(5) {
                let probe = |d: f64| {
                    let mut v = base.clone();
                    v[i] += d;
                    let t = Tensor::from_vec(v, var.shape(), &dev).unwrap();
                    if std::ptr::eq(var, &x) {
                        loss(&t, w.as_tensor())
                    } else {
                        loss(x.as_tensor(), &t)
                    }
                };
                let fd = (probe(1e-5) - probe(-1e-5)) / 2e-5;
                assert!((fd - g[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{fd} vs {}", g[i]);
            }
        }
    }

    /// Batch norm written with broadcasts, differentiated by autograd.
    fn composite_bn(x: &Tensor, g: &Tensor, b: &Tensor, eps: f64) -> Tensor {
        let c = g.dim(0).unwrap();
        let s = (1, c, 1, 1);
        let mean = x.mean_keepdim(3).unwrap().mean_keepdim(2).unwrap().mean_keepdim(0).unwrap();
        let d = x.broadcast_sub(&mean).unwrap();
        let var = d.sqr().unwrap().mean_keepdim(3).unwrap().mean_keepdim(2).unwrap().mean_keepdim(0).unwrap();
        let xhat = d.broadcast_div(&(var + eps).unwrap().sqrt().unwrap()).unwrap();
        xhat.broadcast_mul(&g.reshape(s).unwrap())
            .unwrap()
            .broadcast_add(&b.reshape(s).unwrap())
            .unwrap()
    }

    #[test]
    fn fused_batch_norm_matches_composite() {
        let dev = Device::Cpu;
        let x = Var::randn(1f64, 2.0, (3, 4, 5, 5), &dev).unwrap();
        let g = Var::randn(1f64, 0.5, 4, &dev).unwrap();
        let b = Var::randn(0f64, 0.5, 4, &dev).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (3, 4, 5, 5), &dev).unwrap();
        let fused = |x: &Tensor| {
            let op = BatchNormTrain { eps: 1e-5, stats: Arc::new(Mutex::new(None)) };
            x.apply_op3(g.as_tensor(), b.as_tensor(), op).unwrap()
        };
        let y1 = fused(x.as_tensor());
        let y2 = composite_bn(x.as_tensor(), g.as_tensor(), b.as_tensor(), 1e-5);
        let diff = (&y1 - &y2).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-10, "{diff}");
        let g1 = (y1 * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (y2 * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &g, &b] {
            let d = (g1.get(v).unwrap() - g2.get(v).unwrap())
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!(d < 1e-9, "{d}");
        }
    }

    /// Reference bilinear x2 with half-pixel centers.
    fn naive_upsample(x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let src = |o: usize, n: usize| -> (usize, usize, f64) {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        };
        let mut out = vec![0.0; 4 * h * w];
        for oy in 0..2 * h {
            let (y0, y1, fy) = src(oy, h);
            for ox in 0..2 * w {
                let (x0, x1, fx) = src(ox, w);
                let v = (1.0 - fy) * ((1.0 - fx) * x[y0 * w + x0] + fx * x[y0 * w + x1])
                    + fy * ((1.0 - fx) * x[y1 * w + x0] + fx * x[y1 * w + x1]);
                out[oy * 2 * w + ox] = v;
            }
        }
        out
    }

    #[test]
    fn upsample_matches_reference_bilinear() {
        let x = Tensor::randn(0f64, 1.0, (1, 1, 5, 7), &Device::Cpu).unwrap();
        let got: Vec<f64> = upsample2x(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let want = naive_upsample(&x.flatten_all().unwrap().to_vec1().unwrap(), 5, 7);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_planes_are_independent() {
        let x = Tensor::randn(0f64, 1.0, (2, 3, 1, 4), &Device::Cpu).unwrap();
        let got: Vec<f64> = upsample2x(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let xs: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        for p in 0..6 {
            let want = naive_upsample(&xs[p * 4..(p + 1) * 4], 1, 4);
            for (a, b) in got[p * 16..(p + 1) * 16].iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_gradient_is_the_adjoint() {
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 5, 7), &Device::Cpu).unwrap()).unwrap();
        let y = Tensor::randn(0f64, 1.0, (2, 3, 10, 14), &Device::Cpu).unwrap();
        let lhs = (upsample2x(&x).unwrap() * &y).unwrap().sum_all().unwrap();
        let grads = lhs.backward().unwrap();
        let adj = y.apply_op1(Upsample2xAdjoint).unwrap();
        let rhs = (x.as_tensor() * &adj).unwrap().sum_all().unwrap();
        let (l, r) = (lhs.to_scalar::<f64>().unwrap(), rhs.to_scalar::<f64>().unwrap());
        assert!((l - r).abs() < 1e-10 * (1.0 + l.abs()));
        let g: Vec<f64> = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let a: Vec<f64> = adj.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(g, a);
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let x = Tensor::arange(0f32, 16.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 4, 4))
            .unwrap();
        let y = downsample_area(&x, 2).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![2.5, 4.5, 10.5, 12.5]);
        assert!(downsample_area(&x, 3).is_err());
    }

    #[test]
    fn batch_norm_train_normalizes_and_tracks_stats() {
        let set = NamedParameterSet::new(0, DType::F32, &Device::Cpu);
        let bn = BatchNorm::new(2, &set.root().pp("bn")).unwrap();
        let x = (Tensor::randn(0f32, 1.0, (4, 2, 3, 3), &Device::Cpu).unwrap() * 3.0).unwrap().affine(1.0, 5.0).unwrap();
        let y = bn.forward(&x, true).unwrap();
        let mean = y.mean_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(mean.abs() < 1e-5);
        let rm = set.get("bn.running_mean").unwrap().var.to_vec1::<f32>().unwrap();
        assert!(rm.iter().all(|v| *v > 0.2));
        let _ = bn.forward(&x, false).unwrap();
    }
}
