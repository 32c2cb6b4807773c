//! Image-quality metrics for text removal results.
//!
//! PSNR and MSE work on the [0, 1] RGB values. MSSIM is the mean SSIM on the
//! BT.601 luma. AGE, pEPs and pCEPS compare 8-bit luma: AGE is the mean
//! absolute gray difference, an error pixel differs by more than
//! [`ERROR_THRESHOLD`], and a clustered error pixel is an error pixel whose
//! existing 4-neighbours are all error pixels.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
/// Gray-level difference above which a pixel counts as an error.
pub const ERROR_THRESHOLD: i32 = 20;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Planar RGB image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarImage {
    pub width: usize,
    pub height: usize,
    /// Channel-major: all R, then all G, then all B.
    pub data: Vec<f32>,
}

impl PlanarImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(shape_err!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            ));
        }
        Ok(Self { width, height, data })
    }

    /// Accepts (3, H, W) or (1, 3, H, W).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            _ => t.clone(),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(shape_err!("expected 3 channels, got {c}"));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(w, h, data)
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * w * h];
        for (x, y, p) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                data[c * w * h + i] = p[c] as f32 / 255.0;
            }
        }
        Self { width: w, height: h, data }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let plane = self.width * self.height;
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            image::Rgb(std::array::from_fn(|c| to_u8(self.data[c * plane + i] as f64)))
        })
    }

    pub fn to_tensor(&self, device: &candle_core::Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (3, self.height, self.width), device)?)
    }

    /// BT.601 luma in [0, 1].
    pub fn luma(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        (0..plane)
            .map(|i| (0..3).map(|c| LUMA[c] * self.data[c * plane + i] as f64).sum())
            .collect()
    }

    /// BT.601 luma rounded to 8 bits.
    pub fn luma8(&self) -> Vec<u8> {
        self.luma().into_iter().map(to_u8).collect()
    }
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn check_pair(a: &PlanarImage, b: &PlanarImage) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(shape_err!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width,
            a.height,
            b.width,
            b.height
        ));
    }
    Ok(())
}

pub fn mse(a: &PlanarImage, b: &PlanarImage) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak signal-to-noise ratio in dB for unit peak; [`PSNR_CAP`] at zero error.
pub fn psnr(a: &PlanarImage, b: &PlanarImage) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { PSNR_CAP } else { 10.0 * (1.0 / m).log10() })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of a `w x h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// SSIM of the luma planes with an 11x11 Gaussian window, sigma 1.5.
pub fn ssim(a: &PlanarImage, b: &PlanarImage) -> Result<f64> {
    check_pair(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(shape_err!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"));
    }
    let (x, y) = (a.luma(), b.luma());
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_x = filter_valid(&x, w, h, &k);
    let mu_y = filter_valid(&y, w, h, &k);
    let xx = filter_valid(&prod(&x, &x), w, h, &k);
    let yy = filter_valid(&prod(&y, &y), w, h, &k);
    let xy = filter_valid(&prod(&x, &y), w, h, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cxy = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean SSIM over pairs, in percent.
pub fn mssim(pairs: &[(&PlanarImage, &PlanarImage)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("MSSIM needs at least one pair".into()));
    }
    let mut sum = 0.0;
    for (a, b) in pairs {
        sum += ssim(a, b)?;
    }
    Ok(100.0 * sum / pairs.len() as f64)
}

fn gray_diff(a: &PlanarImage, b: &PlanarImage) -> Result<Vec<i32>> {
    check_pair(a, b)?;
    Ok(a.luma8()
        .iter()
        .zip(b.luma8())
        .map(|(x, y)| (*x as i32 - y as i32).abs())
        .collect())
}

/// Average gray-level error on the 0-255 scale.
pub fn age(a: &PlanarImage, b: &PlanarImage) -> Result<f64> {
    let d = gray_diff(a, b)?;
    Ok(d.iter().map(|v| *v as f64).sum::<f64>() / d.len() as f64)
}

fn error_map(a: &PlanarImage, b: &PlanarImage) -> Result<Vec<bool>> {
    Ok(gray_diff(a, b)?.into_iter().map(|d| d > ERROR_THRESHOLD).collect())
}

/// Fraction of error pixels.
pub fn peps(a: &PlanarImage, b: &PlanarImage) -> Result<f64> {
    let e = error_map(a, b)?;
    Ok(e.iter().filter(|v| **v).count() as f64 / e.len() as f64)
}

/// Fraction of error pixels whose existing 4-neighbours are all error pixels.
pub fn pceps(a: &PlanarImage, b: &PlanarImage) -> Result<f64> {
    let e = error_map(a, b)?;
    let (w, h) = (a.width, a.height);
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !e[y * w + x] {
                continue;
            }
            let clustered = (y == 0 || e[(y - 1) * w + x])
                && (y + 1 == h || e[(y + 1) * w + x])
                && (x == 0 || e[y * w + x - 1])
                && (x + 1 == w || e[y * w + x + 1]);
            if clustered {
                count += 1;
            }
        }
    }
    Ok(count as f64 / e.len() as f64)
}

/// The six image-quality numbers for one pair, or their mean over many.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// dB.
    pub psnr: f64,
    /// On the [0, 1] scale.
    pub mse: f64,
    /// Percent.
    pub mssim: f64,
    /// Gray levels on the 0-255 scale.
    pub age: f64,
    pub peps: f64,
    pub pceps: f64,
}

impl MetricReport {
    pub fn compute(pred: &PlanarImage, gt: &PlanarImage) -> Result<Self> {
        Ok(Self {
            psnr: psnr(pred, gt)?,
            mse: mse(pred, gt)?,
            mssim: 100.0 * ssim(pred, gt)?,
            age: age(pred, gt)?,
            peps: peps(pred, gt)?,
            pceps: pceps(pred, gt)?,
        })
    }

    /// Field-wise arithmetic mean, summed in slice order.
    pub fn mean(reports: &[MetricReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::Empty("no reports to average".into()));
        }
        let n = reports.len() as f64;
        let mut acc = MetricReport::default();
        for r in reports {
            acc.psnr += r.psnr;
            acc.mse += r.mse;
            acc.mssim += r.mssim;
            acc.age += r.age;
            acc.peps += r.peps;
            acc.pceps += r.pceps;
        }
        Ok(MetricReport {
            psnr: acc.psnr / n,
            mse: acc.mse / n,
            mssim: acc.mssim / n,
            age: acc.age / n,
            peps: acc.peps / n,
            pceps: acc.pceps / n,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DirEvaluation {
    /// Per-image reports keyed by file stem, in name order.
    pub images: BTreeMap<String, MetricReport>,
    /// Images that could not be scored, with the reason.
    pub errors: BTreeMap<String, String>,
    pub mean: MetricReport,
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

/// Image files in `dir` keyed by file stem.
pub(crate) fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

pub(crate) fn read_rgb(path: &Path) -> Result<PlanarImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    Ok(PlanarImage::from_rgb8(&img.to_rgb8()))
}

/// Scores every prediction against the ground truth with the same stem.
pub fn evaluate_dir(pred_dir: &Path, gt_dir: &Path) -> Result<DirEvaluation> {
    let preds = image_files(pred_dir)?;
    let gts = image_files(gt_dir)?;
    let mut eval = DirEvaluation::default();
    for name in preds.keys().filter(|n| !gts.contains_key(*n)) {
        eval.errors.insert(name.clone(), "no ground truth".into());
    }
    for name in gts.keys().filter(|n| !preds.contains_key(*n)) {
        eval.errors.insert(name.clone(), "no prediction".into());
    }
    for (name, pred_path) in &preds {
        let Some(gt_path) = gts.get(name) else { continue };
        let scored = read_rgb(pred_path)
            .and_then(|p| read_rgb(gt_path).map(|g| (p, g)))
            .and_then(|(p, g)| MetricReport::compute(&p, &g));
        match scored {
            Ok(r) => {
                eval.images.insert(name.clone(), r);
            }
            Err(e) => {
                eval.errors.insert(name.clone(), e.to_string());
            }
        }
    }
    if eval.images.is_empty() {
        return Err(Error::Empty(format!(
            "no scorable image pairs between {} and {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    let reports: Vec<MetricReport> = eval.images.values().copied().collect();
    eval.mean = MetricReport::mean(&reports)?;
    Ok(eval)
}

const TABLE_HEADER: &str = "name\tpsnr\tmse\tmssim\tage\tpeps\tpceps";

fn table_row(name: &str, r: &MetricReport) -> String {
    format!(
        "{name}\t{:.4}\t{:.6}\t{:.4}\t{:.4}\t{:.6}\t{:.6}",
        r.psnr, r.mse, r.mssim, r.age, r.peps, r.pceps
    )
}

impl DirEvaluation {
    /// Tab-separated table: one row per image, then the mean, then errors.
    pub fn to_table(&self) -> String {
        let mut out = String::from(TABLE_HEADER);
        out.push('\n');
        for (name, r) in &self.images {
            out.push_str(&table_row(name, r));
            out.push('\n');
        }
        out.push_str(&table_row("MEAN", &self.mean));
        out.push('\n');
        if !self.errors.is_empty() {
            out.push_str("\n# errors\n");
            for (name, msg) in &self.errors {
                out.push_str(&format!("{name}\t{msg}\n"));
            }
        }
        out
    }

    /// Writes `report.tsv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tsv = dir.join("report.tsv");
        std::fs::write(&tsv, self.to_table()).map_err(|e| Error::io(&tsv, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(w: usize, h: usize, v: f32) -> PlanarImage {
        PlanarImage::new(w, h, vec![v; 3 * w * h]).unwrap()
    }

    #[test]
    fn identical_images() {
        let a = constant(16, 16, 0.3);
        let r = MetricReport::compute(&a, &a).unwrap();
        assert_eq!(r.psnr, PSNR_CAP);
        assert_eq!(r.mse, 0.0);
        assert!((r.mssim - 100.0).abs() < 1e-12);
        assert_eq!((r.age, r.peps, r.pceps), (0.0, 0.0, 0.0));
    }

    #[test]
    fn uniform_offset_gives_20_db() {
        let a = constant(12, 12, 0.2);
        let b = constant(12, 12, 0.3);
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-7);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        let c = constant(12, 12, 0.7);
        assert!((mse(&a, &c).unwrap() - 0.25).abs() < 1e-7);
    }

    #[test]
    fn full_scale_difference() {
        let a = constant(12, 12, 0.0);
        let b = constant(12, 12, 1.0);
        assert_eq!(age(&a, &b).unwrap(), 255.0);
        assert_eq!(peps(&a, &b).unwrap(), 1.0);
        assert_eq!(pceps(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn isolated_error_pixel_is_not_clustered() {
        let a = constant(3, 3, 0.0);
        let mut b = a.clone();
        for c in 0..3 {
            b.data[c * 9 + 4] = 1.0;
        }
        assert!((peps(&a, &b).unwrap() - 1.0 / 9.0).abs() < 1e-12);
        assert_eq!(pceps(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn ssim_rejects_small_images_and_mismatches() {
        let a = constant(10, 10, 0.5);
        assert!(ssim(&a, &a).is_err());
        assert!(mse(&a, &constant(10, 11, 0.5)).is_err());
        assert!(mssim(&[]).is_err());
    }

    #[test]
    fn equal_constants_give_full_mssim() {
        let a = constant(11, 11, 0.5);
        assert!((mssim(&[(&a, &a)]).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn gray8_uses_bt601() {
        let img = PlanarImage::new(1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(img.luma8(), vec![76]);
    }
}
