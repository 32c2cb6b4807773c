//! Helpers shared by the integration tests: seeded tensors, a tiny loss
//! network, finite differences and straightforward loop implementations of
//! the model's formulas.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use psstrnet::backbone::{FeatureExtractor, Layer};
use psstrnet::metrics::PlanarImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen::<f64>()).collect()
}

pub fn tensor(data: Vec<f64>, shape: &[usize], dtype: DType) -> Tensor {
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType) -> Tensor {
    let n = shape.iter().product();
    tensor(uniform(rng, n), shape, dtype)
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

/// Two 3x3 conv + ReLU layers, both tapped, no input normalization.
pub fn stub_backbone(seed: u64) -> FeatureExtractor {
    let mut r = rng(seed);
    let mut conv = |cin: usize, cout: usize| {
        let w: Vec<f64> = (0..cout * cin * 9).map(|_| r.gen_range(-0.5..0.5)).collect();
        let b: Vec<f64> = (0..cout).map(|_| r.gen_range(-0.1..0.1)).collect();
        Layer::Conv {
            weight: tensor(w, &[cout, cin, 3, 3], DType::F64),
            bias: tensor(b, &[cout], DType::F64),
        }
    };
    let layers = vec![conv(3, 4), Layer::Relu, conv(4, 5), Layer::Relu];
    FeatureExtractor::new(layers, vec![1, 3], false).unwrap()
}

/// Worst relative error between the autograd gradient of `f` at `x` and
/// central differences, over every component.
pub fn gradient_error(x: &Tensor, f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_tensor(x).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let analytic = values(grads.get(var.as_tensor()).expect("input receives a gradient"));
    let base = values(x);
    let h = 1e-6;
    let mut worst = 0f64;
    for i in 0..base.len() {
        let at = |d: f64| {
            let mut v = base.clone();
            v[i] += d;
            scalar(&f(&tensor(v, x.dims(), DType::F64)))
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        let scale = numeric.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max((numeric - analytic[i]).abs() / scale);
    }
    worst
}

/// Index of element (b, c, y, x) in a contiguous NCHW buffer.
pub fn at(dims: &[usize], b: usize, c: usize, y: usize, x: usize) -> usize {
    ((b * dims[1] + c) * dims[2] + y) * dims[3] + x
}

pub fn loop_merge(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| if x >= y { *x } else { *y }).collect()
}

/// Per-pixel `i_in * (1 - m) + i_temp * m` with the mask broadcast over channels.
pub fn loop_compose(i_in: &[f32], i_temp: &[f32], m: &[f32], dims: &[usize]) -> Vec<f32> {
    let mut out = vec![0f32; i_in.len()];
    let mdims = [dims[0], 1, dims[2], dims[3]];
    for b in 0..dims[0] {
        for c in 0..dims[1] {
            for y in 0..dims[2] {
                for x in 0..dims[3] {
                    let i = at(dims, b, c, y, x);
                    let mv = m[at(&mdims, b, 0, y, x)];
                    out[i] = i_in[i] * (1.0 - mv) + i_temp[i] * mv;
                }
            }
        }
    }
    out
}

/// Per-pixel adaptive fusion in f64. Returns (image, mask).
pub fn loop_fuse(results: &[Vec<f64>], masks: &[Vec<f64>], i_in: &[f64], dims: &[usize], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = results.len() as f64;
    let mdims = [dims[0], 1, dims[2], dims[3]];
    let mut out = vec![0f64; i_in.len()];
    let mut fused_mask = vec![0f64; masks[0].len()];
    for b in 0..dims[0] {
        for y in 0..dims[2] {
            for x in 0..dims[3] {
                let mi = at(&mdims, b, 0, y, x);
                let mbar: f64 = masks.iter().map(|m| m[mi]).sum::<f64>() / n;
                fused_mask[mi] = mbar;
                for c in 0..dims[1] {
                    let i = at(dims, b, c, y, x);
                    let weighted: f64 = results.iter().zip(masks).map(|(r, m)| r[i] * m[mi]).sum::<f64>() / n;
                    let blended = (weighted + eps) / (mbar + eps);
                    out[i] = i_in[i] * (1.0 - mbar) + blended * mbar;
                }
            }
        }
    }
    (out, fused_mask)
}

/// Region content loss with explicit loops.
pub fn loop_region_content(outs: &[Vec<f64>], gt: &[f64], m: &[f64], dims: &[usize], g_text: f64, g_back: f64) -> f64 {
    let mdims = [dims[0], 1, dims[2], dims[3]];
    let n = gt.len() as f64;
    let mut total = 0.0;
    for o in outs {
        let (mut text, mut back) = (0.0, 0.0);
        for b in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        let i = at(dims, b, c, y, x);
                        let mv = m[at(&mdims, b, 0, y, x)];
                        text += (mv * (o[i] - gt[i])).abs();
                        back += ((1.0 - mv) * (o[i] - gt[i])).abs();
                    }
                }
            }
        }
        total += g_text * text / n + g_back * back / n;
    }
    total
}

/// Weighted dice loss with explicit loops.
pub fn loop_dice(masks: &[Vec<f64>], gt: &[f64], gammas: &[f64], smooth: f64) -> f64 {
    let mut total = 0.0;
    for (m, g) in masks.iter().zip(gammas) {
        let (mut inter, mut mm, mut gg) = (0.0, 0.0, 0.0);
        for i in 0..gt.len() {
            inter += m[i] * gt[i];
            mm += m[i] * m[i];
            gg += gt[i] * gt[i];
        }
        total += g * (1.0 - (2.0 * inter + smooth) / (mm + gg + smooth));
    }
    total
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> PlanarImage {
    let data = (0..3 * w * h).map(|_| rng.gen::<f32>()).collect();
    PlanarImage::new(w, h, data).unwrap()
}

/// Perturbs a copy of `img` so that some pixels exceed the error threshold.
pub fn perturbed(rng: &mut ChaCha8Rng, img: &PlanarImage) -> PlanarImage {
    let mut out = img.clone();
    let amount = rng.gen_range(0.0..0.3f32);
    for v in out.data.iter_mut() {
        if rng.gen_bool(0.5) {
            *v = (*v + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0);
        }
    }
    out
}

/// A training setup small enough to run many steps in a test.
pub fn tiny_train_config(seed: u64) -> psstrnet::train::TrainConfig {
    use psstrnet::backbone::{BackboneConfig, WeightSource};
    use psstrnet::model::PsstrConfig;
    psstrnet::train::TrainConfig {
        model: PsstrConfig {
            base_channels: 4,
            input_size: (16, 16),
            ..Default::default()
        },
        backbone: BackboneConfig {
            width_divisor: 16,
            weights: Some(WeightSource::Random { seed: 1 }),
            ..Default::default()
        },
        batch_size: 6,
        epochs: 2,
        seed,
        checkpoint_interval: 1,
        ..Default::default()
    }
}

/// Writes a synthetic dataset of `count` train and `test` test pairs.
pub fn tiny_dataset(root: &std::path::Path, count: usize, test: usize, size: usize) {
    let cfg = psstrnet::data::SynthConfig {
        count,
        test_count: test,
        image_size: (size, size),
        glyph_height: (size / 4, size / 2),
        stroke: (1, 2),
        seed: 3,
        ..Default::default()
    };
    psstrnet::data::synth_toy_dataset(&cfg, root).unwrap();
}

pub fn gray8(img: &PlanarImage) -> Vec<i32> {
    let n = img.width * img.height;
    (0..n)
        .map(|i| {
            let y = 0.299 * img.data[i] as f64 + 0.587 * img.data[n + i] as f64 + 0.114 * img.data[2 * n + i] as f64;
            (y * 255.0).round().clamp(0.0, 255.0) as i32
        })
        .collect()
}

pub fn brute_mse(a: &PlanarImage, b: &PlanarImage) -> f64 {
    let mut s = 0.0;
    for c in 0..3 {
        for y in 0..a.height {
            for x in 0..a.width {
                let i = (c * a.height + y) * a.width + x;
                let d = a.data[i] as f64 - b.data[i] as f64;
                s += d * d;
            }
        }
    }
    s / (3 * a.width * a.height) as f64
}

pub fn brute_errors(a: &PlanarImage, b: &PlanarImage) -> (f64, Vec<Vec<bool>>) {
    let (ga, gb) = (gray8(a), gray8(b));
    let mut sum = 0.0;
    let mut grid = vec![vec![false; a.width]; a.height];
    for y in 0..a.height {
        for x in 0..a.width {
            let d = (ga[y * a.width + x] - gb[y * a.width + x]).abs();
            sum += d as f64;
            grid[y][x] = d > 20;
        }
    }
    (sum / (a.width * a.height) as f64, grid)
}

pub fn brute_clustered(grid: &[Vec<bool>]) -> usize {
    let (h, w) = (grid.len() as isize, grid[0].len() as isize);
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            if !grid[y as usize][x as usize] {
                continue;
            }
            let ok = [(0, 1), (0, -1), (1, 0), (-1, 0)].iter().all(|(dy, dx)| {
                let (yy, xx) = (y + dy, x + dx);
                yy < 0 || xx < 0 || yy >= h || xx >= w || grid[yy as usize][xx as usize]
            });
            n += ok as usize;
        }
    }
    n
}

/// SSIM evaluated window by window with a full 2-D Gaussian.
pub fn direct_ssim(a: &PlanarImage, b: &PlanarImage) -> f64 {
    let lum = |img: &PlanarImage| -> Vec<f64> {
        let n = img.width * img.height;
        (0..n)
            .map(|i| 0.299 * img.data[i] as f64 + 0.587 * img.data[n + i] as f64 + 0.114 * img.data[2 * n + i] as f64)
            .collect()
    };
    let (x, y) = (lum(a), lum(b));
    let (w, h) = (a.width, a.height);
    let mut g = [[0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for oy in 0..=h - 11 {
        for ox in 0..=w - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = g[i][j] / total;
                    let p = (oy + i) * w + ox + j;
                    mx += k * x[p];
                    my += k * y[p];
                    sxx += k * x[p] * x[p];
                    syy += k * y[p] * y[p];
                    sxy += k * x[p] * y[p];
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}
