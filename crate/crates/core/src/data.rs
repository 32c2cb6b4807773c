//! Paired-image datasets: loading, mask derivation, augmentation and a
//! synthetic toy-text generator.
//!
//! On disk a split is `root/{split}/{input,gt}/NAME.ext`, optionally with
//! `mask/NAME.ext`. Names are matched by file stem.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::metrics::{image_files, read_rgb, PlanarImage};

/// Mixes `parts` into `base` with SplitMix64 so per-item seeds are
/// independent of processing order.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, p| mix(acc ^ mix(*p)))
}

/// Single-channel binary or soft mask in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Mask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_gray8(img: &image::GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(|p| if p[0] > 127 { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn to_gray8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.data[y as usize * self.width + x as usize];
            image::Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.dims() {
            [1, 1, h, w] | [1, h, w] | [h, w] => (*h, *w),
            dims => return Err(shape_err!("expected a single-channel mask, got {:?}", dims)),
        };
        let data = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(Self { width: w, height: h, data })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (1, self.height, self.width), device)?)
    }

    pub fn ones(&self) -> usize {
        self.data.iter().filter(|v| **v >= 0.5).count()
    }
}

/// Intersection over union of two masks binarized at 0.5. Two empty masks
/// score 1.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(shape_err!("mask sizes differ"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.data.iter().zip(&b.data) {
        let (x, y) = (*x >= 0.5, *y >= 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Square-element dilation, computed separably.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width, mask.height);
    let mut rows = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(radius), (x + radius).min(w - 1));
            rows[y * w + x] = (lo..=hi).map(|i| mask.data[y * w + i]).fold(0.0, f32::max);
        }
    }
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(radius), (y + radius).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|j| rows[j * w + x]).fold(0.0, f32::max);
        }
    }
    Mask { width: w, height: h, data: out }
}

/// Marks pixels whose largest channel difference exceeds `threshold`, then
/// dilates by `radius`.
pub fn derive_mask(input: &PlanarImage, gt: &PlanarImage, threshold: f32, radius: usize) -> Result<Mask> {
    if input.width != gt.width || input.height != gt.height {
        return Err(shape_err!(
            "input {}x{} and gt {}x{} differ",
            input.width,
            input.height,
            gt.width,
            gt.height
        ));
    }
    let plane = input.width * input.height;
    let data = (0..plane)
        .map(|i| {
            let d = (0..3)
                .map(|c| (input.data[c * plane + i] - gt.data[c * plane + i]).abs())
                .fold(0.0, f32::max);
            if d > threshold { 1.0 } else { 0.0 }
        })
        .collect();
    let raw = Mask { width: input.width, height: input.height, data };
    Ok(dilate(&raw, radius))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub input: PlanarImage,
    pub gt: PlanarImage,
    pub mask: Mask,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.input.width
    }

    pub fn height(&self) -> usize {
        self.input.height
    }
}

/// A batch as (B,3,H,W), (B,3,H,W), (B,1,H,W) tensors.
#[derive(Clone, Debug)]
pub struct Batch {
    pub names: Vec<String>,
    pub input: Tensor,
    pub gt: Tensor,
    pub mask: Tensor,
}

pub fn collate(samples: &[Sample], device: &Device) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::Empty("empty batch".into()))?;
    let (w, h) = (first.width(), first.height());
    if let Some(s) = samples.iter().find(|s| s.width() != w || s.height() != h) {
        return Err(shape_err!("{} is {}x{}, batch is {w}x{h}", s.name, s.width(), s.height()));
    }
    let stack = |f: &dyn Fn(&Sample) -> Result<Tensor>| -> Result<Tensor> {
        let ts = samples.iter().map(f).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ts, 0)?)
    };
    Ok(Batch {
        names: samples.iter().map(|s| s.name.clone()).collect(),
        input: stack(&|s| s.input.to_tensor(device))?,
        gt: stack(&|s| s.gt.to_tensor(device))?,
        mask: stack(&|s| s.mask.to_tensor(device))?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Always derive from the input/gt difference.
    Derived,
    /// Require a mask file for every pair.
    Recorded,
    /// Use the mask file when present, derive otherwise.
    PreferRecorded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoaderConfig {
    pub input_dir: String,
    pub gt_dir: String,
    pub mask_dir: String,
    pub mask_source: MaskSource,
    /// Per-channel difference threshold on the [0, 1] scale.
    pub threshold: f32,
    pub dilate_radius: usize,
    /// (height, width) every sample is resized to; `None` keeps file sizes.
    pub image_size: Option<(usize, usize)>,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        Self {
            input_dir: "input".into(),
            gt_dir: "gt".into(),
            mask_dir: "mask".into(),
            mask_source: MaskSource::PreferRecorded,
            threshold: 25.0 / 255.0,
            dilate_radius: 3,
            image_size: Some((256, 256)),
        }
    }
}

/// Name-matched pairs of one split. Images are read lazily by [`PairDataset::get`].
#[derive(Clone, Debug)]
pub struct PairDataset {
    cfg: LoaderConfig,
    names: Vec<String>,
    inputs: BTreeMap<String, PathBuf>,
    gts: BTreeMap<String, PathBuf>,
    masks: BTreeMap<String, PathBuf>,
    unmatched: BTreeMap<String, String>,
}

/// Indexes `root/split`. A missing split directory is an error; an empty one
/// gives an empty dataset and a warning.
pub fn load_pairs(root: &Path, split: &str, cfg: &LoaderConfig) -> Result<PairDataset> {
    let base = root.join(split);
    let inputs = image_files(&base.join(&cfg.input_dir))?;
    let gts = image_files(&base.join(&cfg.gt_dir))?;
    let mask_dir = base.join(&cfg.mask_dir);
    let masks = match cfg.mask_source {
        MaskSource::Derived => BTreeMap::new(),
        MaskSource::Recorded => image_files(&mask_dir)?,
        MaskSource::PreferRecorded if mask_dir.is_dir() => image_files(&mask_dir)?,
        MaskSource::PreferRecorded => BTreeMap::new(),
    };
    let mut unmatched = BTreeMap::new();
    let mut names = Vec::new();
    for name in inputs.keys() {
        if !gts.contains_key(name) {
            unmatched.insert(name.clone(), "no ground truth".to_string());
        } else if cfg.mask_source == MaskSource::Recorded && !masks.contains_key(name) {
            unmatched.insert(name.clone(), "no mask".to_string());
        } else {
            names.push(name.clone());
        }
    }
    for name in gts.keys().filter(|n| !inputs.contains_key(*n)) {
        unmatched.insert(name.clone(), "no input".to_string());
    }
    for (name, why) in &unmatched {
        log::warn!("{}: skipping {name}: {why}", base.display());
    }
    if names.is_empty() {
        log::warn!("{}: no image pairs", base.display());
    }
    Ok(PairDataset { cfg: cfg.clone(), names, inputs, gts, masks, unmatched })
}

fn resize_rgb(img: image::RgbImage, size: Option<(usize, usize)>) -> image::RgbImage {
    match size {
        Some((h, w)) if (img.height() as usize, img.width() as usize) != (h, w) => {
            image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Triangle)
        }
        _ => img,
    }
}

fn open_rgb(path: &Path, size: Option<(usize, usize)>) -> Result<PlanarImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    Ok(PlanarImage::from_rgb8(&resize_rgb(img, size)))
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Matched names in lexicographic order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Files without a counterpart, with the reason.
    pub fn unmatched(&self) -> &BTreeMap<String, String> {
        &self.unmatched
    }

    pub fn config(&self) -> &LoaderConfig {
        &self.cfg
    }

    pub fn get(&self, index: usize) -> Result<Sample> {
        let name = self
            .names
            .get(index)
            .ok_or_else(|| Error::Config(format!("sample index {index} out of range")))?;
        let size = self.cfg.image_size;
        let input = open_rgb(&self.inputs[name], size)?;
        let gt = open_rgb(&self.gts[name], size)?;
        if (input.width, input.height) != (gt.width, gt.height) {
            return Err(shape_err!(
                "{name}: input {}x{} and gt {}x{} differ",
                input.width,
                input.height,
                gt.width,
                gt.height
            ));
        }
        let mask = match self.masks.get(name) {
            Some(path) => {
                let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
                let img = if (img.width() as usize, img.height() as usize) != (input.width, input.height) {
                    image::imageops::resize(
                        &img,
                        input.width as u32,
                        input.height as u32,
                        image::imageops::FilterType::Nearest,
                    )
                } else {
                    img
                };
                Mask::from_gray8(&img)
            }
            None => derive_mask(&input, &gt, self.cfg.threshold, self.cfg.dilate_radius)?,
        };
        Ok(Sample { name: name.clone(), input, gt, mask })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Sample>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }
}

/// Reads an RGB raster and resizes it if requested.
pub fn read_image(path: &Path, size: Option<(usize, usize)>) -> Result<PlanarImage> {
    match size {
        None => read_rgb(path),
        some => open_rgb(path, some),
    }
}

pub fn write_image(path: &Path, img: &PlanarImage) -> Result<()> {
    img.to_rgb8().save(path).map_err(|e| Error::image(path, e))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    mask.to_gray8().save(path).map_err(|e| Error::image(path, e))
}

/// Largest rotation applied by [`augment`], in degrees.
pub const MAX_ROTATION_DEG: f64 = 10.0;

/// Mirrors every plane left to right.
pub fn flip_horizontal(s: &Sample) -> Sample {
    let (w, h) = (s.width(), s.height());
    let flip = |data: &[f32], planes: usize| {
        let mut out = vec![0f32; data.len()];
        for p in 0..planes {
            for y in 0..h {
                for x in 0..w {
                    out[p * w * h + y * w + x] = data[p * w * h + y * w + (w - 1 - x)];
                }
            }
        }
        out
    };
    Sample {
        name: s.name.clone(),
        input: PlanarImage { data: flip(&s.input.data, 3), ..s.input.clone() },
        gt: PlanarImage { data: flip(&s.gt.data, 3), ..s.gt.clone() },
        mask: Mask { data: flip(&s.mask.data, 1), ..s.mask.clone() },
    }
}

/// Rotates about the image centre with bilinear sampling and clamped
/// borders. The mask is re-binarized at 0.5.
pub fn rotate(s: &Sample, degrees: f64) -> Sample {
    let (w, h) = (s.width(), s.height());
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    // Source coordinates and weights for every output pixel.
    let taps: Vec<[(usize, f32); 4]> = (0..h * w)
        .map(|i| {
            let (dx, dy) = ((i % w) as f64 - cx, (i / w) as f64 - cy);
            let sx = (cos * dx + sin * dy + cx).clamp(0.0, w as f64 - 1.0);
            let sy = (-sin * dx + cos * dy + cy).clamp(0.0, h as f64 - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            [
                (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
                (y0 * w + x1, fx * (1.0 - fy)),
                (y1 * w + x0, (1.0 - fx) * fy),
                (y1 * w + x1, fx * fy),
            ]
        })
        .collect();
    let warp = |data: &[f32], planes: usize| {
        let mut out = vec![0f32; data.len()];
        for p in 0..planes {
            let src = &data[p * w * h..(p + 1) * w * h];
            for (o, t) in out[p * w * h..(p + 1) * w * h].iter_mut().zip(&taps) {
                *o = t.iter().map(|(j, wt)| src[*j] * wt).sum();
            }
        }
        out
    };
    let mask = warp(&s.mask.data, 1)
        .into_iter()
        .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    Sample {
        name: s.name.clone(),
        input: PlanarImage { data: warp(&s.input.data, 3), ..s.input.clone() },
        gt: PlanarImage { data: warp(&s.gt.data, 3), ..s.gt.clone() },
        mask: Mask { data: mask, ..s.mask.clone() },
    }
}

/// Random horizontal flip (p = 0.5) and rotation in +-10 degrees, applied
/// identically to input, gt and mask.
pub fn augment(s: &Sample, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.gen_bool(0.5);
    let angle = rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
    let s = if flip { flip_horizontal(s) } else { s.clone() };
    rotate(&s, angle)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Pairs written to the train split.
    pub count: usize,
    /// Pairs written to the test split.
    pub test_count: usize,
    /// (height, width).
    pub image_size: (usize, usize),
    /// Inclusive range of glyph strings per image.
    pub strings: (usize, usize),
    /// Inclusive range of glyphs per string.
    pub glyphs: (usize, usize),
    /// Inclusive range of glyph heights in pixels.
    pub glyph_height: (usize, usize),
    /// Inclusive range of stroke widths in pixels.
    pub stroke: (usize, usize),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 10,
            test_count: 0,
            image_size: (64, 64),
            strings: (1, 4),
            glyphs: (2, 5),
            glyph_height: (10, 18),
            stroke: (2, 3),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (usize, usize)| lo >= 1 && lo <= hi;
        if self.count == 0 {
            return Err(Error::Config("synth count must be >= 1".into()));
        }
        if self.image_size.0 < 8 || self.image_size.1 < 8 {
            return Err(Error::Config("synth images must be at least 8x8".into()));
        }
        for (name, r) in [
            ("strings", self.strings),
            ("glyphs", self.glyphs),
            ("glyph_height", self.glyph_height),
            ("stroke", self.stroke),
        ] {
            if !range_ok(r) {
                return Err(Error::Config(format!("synth {name} range {r:?} is invalid")));
            }
        }
        if self.glyph_height.1 > self.image_size.0 {
            return Err(Error::Config("glyphs taller than the image".into()));
        }
        Ok(())
    }
}

/// Stroke endpoints of a glyph cell, in unit coordinates.
const SEGMENTS: [((f64, f64), (f64, f64)); 10] = [
    ((0.0, 0.0), (1.0, 0.0)),
    ((0.0, 0.5), (1.0, 0.5)),
    ((0.0, 1.0), (1.0, 1.0)),
    ((0.0, 0.0), (0.0, 1.0)),
    ((1.0, 0.0), (1.0, 1.0)),
    ((0.5, 0.0), (0.5, 1.0)),
    ((0.0, 0.0), (1.0, 1.0)),
    ((1.0, 0.0), (0.0, 1.0)),
    ((0.0, 1.0), (0.5, 0.0)),
    ((0.5, 0.0), (1.0, 1.0)),
];

fn render_background(rng: &mut ChaCha8Rng, w: usize, h: usize) -> (PlanarImage, f32) {
    let base: f32 = rng.gen_range(0.25..0.75);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.08..0.08));
    let (gx, gy): (f32, f32) = (rng.gen_range(-0.06..0.06), rng.gen_range(-0.06..0.06));
    let freq: f32 = rng.gen_range(0.1..0.6);
    let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
    let amp: f32 = rng.gen_range(0.0..0.05);
    let (sa, ca) = angle.sin_cos();
    let mut data = vec![0f32; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f32 / w as f32 - 0.5, y as f32 / h as f32 - 0.5);
            let stripe = amp * ((x as f32 * ca + y as f32 * sa) * freq + phase).sin();
            let grain = rng.gen_range(-0.01..0.01);
            for c in 0..3 {
                let val = base + tint[c] + gx * u + gy * v + stripe + grain;
                data[c * w * h + y * w + x] = quantize(val);
            }
        }
    }
    (PlanarImage { width: w, height: h, data }, base)
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0) };
    let (dx, dy) = (p.0 - (a.0 + t * vx), p.1 - (a.1 + t * vy));
    (dx * dx + dy * dy).sqrt()
}

fn render_strings(rng: &mut ChaCha8Rng, cfg: &SynthConfig, mask: &mut Mask) {
    let (w, h) = (mask.width, mask.height);
    let n_strings = rng.gen_range(cfg.strings.0..=cfg.strings.1);
    for _ in 0..n_strings {
        let gh = rng.gen_range(cfg.glyph_height.0..=cfg.glyph_height.1) as f64;
        let gw = (gh * rng.gen_range(0.5..0.8)).max(3.0);
        let gap = (gh * 0.25).max(1.0);
        let stroke = rng.gen_range(cfg.stroke.0..=cfg.stroke.1) as f64;
        let n_glyphs = rng.gen_range(cfg.glyphs.0..=cfg.glyphs.1);
        let total = n_glyphs as f64 * (gw + gap) - gap;
        let x0 = rng.gen_range(0.0..(w as f64 - total.min(w as f64 - 1.0)).max(1.0));
        let y0 = rng.gen_range(0.0..(h as f64 - gh).max(1.0));
        for g in 0..n_glyphs {
            let gx = x0 + g as f64 * (gw + gap);
            let n_seg = rng.gen_range(2..=4);
            let mut picked = Vec::with_capacity(n_seg);
            while picked.len() < n_seg {
                let s = rng.gen_range(0..SEGMENTS.len());
                if !picked.contains(&s) {
                    picked.push(s);
                }
            }
            let inset = stroke / 2.0;
            for s in picked {
                let ((ax, ay), (bx, by)) = SEGMENTS[s];
                let a = (gx + inset + ax * (gw - stroke), y0 + inset + ay * (gh - stroke));
                let b = (gx + inset + bx * (gw - stroke), y0 + inset + by * (gh - stroke));
                let r = stroke / 2.0;
                let ylo = (a.1.min(b.1) - r).floor().max(0.0) as usize;
                let yhi = ((a.1.max(b.1) + r).ceil() as usize).min(h - 1);
                let xlo = (a.0.min(b.0) - r).floor().max(0.0) as usize;
                let xhi = ((a.0.max(b.0) + r).ceil() as usize).min(w - 1);
                for y in ylo..=yhi {
                    for x in xlo..=xhi {
                        if segment_distance((x as f64 + 0.5, y as f64 + 0.5), a, b) <= r {
                            mask.data[y * w + x] = 1.0;
                        }
                    }
                }
            }
        }
    }
}

/// Renders one synthetic pair from its own seed.
pub fn synth_sample(cfg: &SynthConfig, name: &str, seed: u64) -> Sample {
    let (h, w) = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gt, base) = render_background(&mut rng, w, h);
    let mut mask = Mask::zeros(w, h);
    render_strings(&mut rng, cfg, &mut mask);
    // Text contrasts with the background so the difference mask recovers it.
    let color: [f32; 3] = if base > 0.5 {
        std::array::from_fn(|_| rng.gen_range(0.0..0.12))
    } else {
        std::array::from_fn(|_| rng.gen_range(0.88..1.0))
    };
    let plane = w * h;
    let mut input = gt.clone();
    for i in 0..plane {
        if mask.data[i] >= 0.5 {
            for c in 0..3 {
                input.data[c * plane + i] = quantize(color[c]);
            }
        }
    }
    Sample { name: name.to_string(), input, gt, mask }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SynthSummary {
    pub train: usize,
    pub test: usize,
}

/// Writes `count` train and `test_count` test triplets under `root`.
pub fn synth_toy_dataset(cfg: &SynthConfig, root: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let splits = [("train", 0..cfg.count), ("test", cfg.count..cfg.count + cfg.test_count)];
    for (split, range) in splits {
        if range.is_empty() {
            continue;
        }
        let base = root.join(split);
        for sub in ["input", "gt", "mask"] {
            let d = base.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for index in range {
            let name = format!("{index:05}");
            let s = synth_sample(cfg, &name, derive_seed(cfg.seed, &[index as u64]));
            let file = format!("{name}.png");
            write_image(&base.join("input").join(&file), &s.input)?;
            write_image(&base.join("gt").join(&file), &s.gt)?;
            write_mask(&base.join("mask").join(&file), &s.mask)?;
        }
    }
    Ok(SynthSummary { train: cfg.count, test: cfg.test_count })
}
