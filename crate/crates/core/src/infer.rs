//! Single-image inference and per-iteration panel strips.

use candle_core::{Device, Tensor};

use crate::data::Mask;
use crate::error::Result;
use crate::metrics::PlanarImage;
use crate::model::config::BOTTLENECK_STRIDE;
use crate::model::Psstrnet;

/// Pixels between panel tiles.
pub const PANEL_GAP: u32 = 2;

#[derive(Clone, Debug)]
pub struct Inference {
    pub image: PlanarImage,
    pub mask: Mask,
    /// Positioning-head masks, one per pass.
    pub raw_masks: Vec<Mask>,
    /// Composited results, one per pass.
    pub outputs: Vec<PlanarImage>,
}

/// Replicates the last row/column until both sides are multiples of `m`.
fn pad_edges(img: &PlanarImage, m: usize) -> PlanarImage {
    let (w, h) = (img.width.div_ceil(m) * m, img.height.div_ceil(m) * m);
    if (w, h) == (img.width, img.height) {
        return img.clone();
    }
    let mut data = vec![0f32; 3 * w * h];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x.min(img.width - 1), y.min(img.height - 1));
                data[c * w * h + y * w + x] = img.data[c * img.width * img.height + sy * img.width + sx];
            }
        }
    }
    PlanarImage { width: w, height: h, data }
}

fn crop_image(t: &Tensor, w: usize, h: usize) -> Result<PlanarImage> {
    PlanarImage::from_tensor(&t.narrow(2, 0, h)?.narrow(3, 0, w)?)
}

fn crop_mask(t: &Tensor, w: usize, h: usize) -> Result<Mask> {
    Mask::from_tensor(&t.narrow(2, 0, h)?.narrow(3, 0, w)?)
}

/// Runs the network on one image of any size. Sizes that are not multiples
/// of 4 are edge-padded and the results cropped back.
pub fn infer_image(net: &Psstrnet, img: &PlanarImage, iterations: usize, fusion: bool) -> Result<Inference> {
    let (w, h) = (img.width, img.height);
    let padded = pad_edges(img, BOTTLENECK_STRIDE);
    let x = padded.to_tensor(&Device::Cpu)?.unsqueeze(0)?;
    let out = net.forward_with(&x, iterations, fusion, false)?;
    Ok(Inference {
        image: crop_image(&out.image, w, h)?,
        mask: crop_mask(&out.mask, w, h)?,
        raw_masks: out
            .states
            .iter()
            .map(|s| crop_mask(&s.mask_raw, w, h))
            .collect::<Result<_>>()?,
        outputs: out
            .states
            .iter()
            .map(|s| crop_image(&s.removed, w, h))
            .collect::<Result<_>>()?,
    })
}

fn mask_rgb(m: &Mask) -> image::RgbImage {
    let g = m.to_gray8();
    image::RgbImage::from_fn(g.width(), g.height(), |x, y| {
        let v = g.get_pixel(x, y)[0];
        image::Rgb([v, v, v])
    })
}

/// Horizontal strip: input, raw mask per pass, output per pass, final result,
/// fused mask. Tiles are separated by [`PANEL_GAP`] white pixels.
pub fn panel_strip(input: &PlanarImage, inf: &Inference) -> image::RgbImage {
    let mut tiles = vec![input.to_rgb8()];
    tiles.extend(inf.raw_masks.iter().map(mask_rgb));
    tiles.extend(inf.outputs.iter().map(|o| o.to_rgb8()));
    tiles.push(inf.image.to_rgb8());
    tiles.push(mask_rgb(&inf.mask));
    let (w, h) = (input.width as u32, input.height as u32);
    let n = tiles.len() as u32;
    let mut strip = image::RgbImage::from_pixel(n * w + (n - 1) * PANEL_GAP, h, image::Rgb([255, 255, 255]));
    for (i, tile) in tiles.iter().enumerate() {
        image::imageops::replace(&mut strip, tile, (i as u32 * (w + PANEL_GAP)) as i64, 0);
    }
    strip
}
