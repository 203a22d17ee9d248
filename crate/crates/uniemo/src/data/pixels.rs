//! Image loading, saving, resizing, person-region extraction, and
//! colour histograms.
//!
//! Pixels live in `[H, W, 3]` arrays of `f64` in `[0, 1]`, channels
//! innermost, matching the layout the patchifier expects.

use crate::autograd::Array;
use crate::{Error, Result};
use ndarray::IxDyn;
use std::path::Path;

/// Decode an image file into an `[H, W, 3]` array scaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Array> {
    let img = image::open(path)
        .map_err(|e| Error::invalid(format!("decoding {}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array::zeros(IxDyn(&[h, w, 3]));
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = pixel.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Encode an `[H, W, 3]` array as a lossless PNG, clamping to `[0, 1]`.
pub fn save_image(pixels: &Array, path: &Path) -> Result<()> {
    let shape = pixels.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::invalid(format!(
            "expected [H, W, 3] pixels, got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                let v = pixels[[y, x, c]].clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::invalid(format!("encoding {}: {e}", path.display())))
}

/// Align-corners bilinear resize of an `[H, W, C]` array.
///
/// Corner pixels of the output coincide with corner pixels of the input;
/// a resize to the same dimensions reproduces the input exactly. An input
/// dimension of one is broadcast across the corresponding output axis.
pub fn bilinear_resize(pixels: &Array, out_h: usize, out_w: usize) -> Result<Array> {
    let shape = pixels.shape();
    if shape.len() != 3 {
        return Err(Error::invalid(format!(
            "expected [H, W, C] pixels, got {shape:?}"
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize dimensions must be positive"));
    }
    // Align-corners sampling position for output index i along an axis of
    // input length n and output length m: i * (n - 1) / (m - 1). When either
    // length is one the ratio degenerates; sample index 0 in that case.
    let scale = |n: usize, m: usize, i: usize| -> f64 {
        if n == 1 || m == 1 {
            0.0
        } else {
            i as f64 * (n - 1) as f64 / (m - 1) as f64
        }
    };
    let mut out = Array::zeros(IxDyn(&[out_h, out_w, c]));
    for oy in 0..out_h {
        let sy = scale(h, out_h, oy);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = scale(w, out_w, ox);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let top = pixels[[y0, x0, ch]] * (1.0 - fx) + pixels[[y0, x1, ch]] * fx;
                let bot = pixels[[y1, x0, ch]] * (1.0 - fx) + pixels[[y1, x1, ch]] * fx;
                out[[oy, ox, ch]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Build the person-focused view of an image.
///
/// With no box the image passes through unchanged. With a box, the region
/// `[y0..y1, x0..x1]` (coordinates rounded to the nearest pixel) is cropped
/// and resized back to the full image dimensions, so downstream code sees a
/// uniform shape whether or not a person was annotated.
pub fn derive_person_map(pixels: &Array, person_box: Option<[f64; 4]>) -> Result<Array> {
    let shape = pixels.shape();
    if shape.len() != 3 {
        return Err(Error::invalid(format!(
            "expected [H, W, C] pixels, got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let Some([bx0, by0, bx1, by1]) = person_box else {
        return Ok(pixels.clone());
    };
    let x0 = bx0.round() as isize;
    let y0 = by0.round() as isize;
    let x1 = bx1.round() as isize;
    let y1 = by1.round() as isize;
    if x0 < 0 || y0 < 0 || x0 >= x1 || y0 >= y1 || x1 > w as isize || y1 > h as isize {
        return Err(Error::invalid(format!(
            "person box [{bx0}, {by0}, {bx1}, {by1}] outside {w}x{h} image"
        )));
    }
    let crop = pixels
        .slice(ndarray::s![y0 as usize..y1 as usize, x0 as usize..x1 as usize, ..])
        .to_owned()
        .into_dyn();
    bilinear_resize(&crop, h, w)
}

/// Per-channel colour histogram, flattened channel-major.
///
/// Each value lands in bin `min(floor(v * bins), bins - 1)`; counts are
/// normalised by the pixel count so every channel's bins sum to one. The
/// output is `[bins * C]` with channel 0's bins first.
pub fn color_histogram(pixels: &Array, bins: usize) -> Result<Array> {
    let shape = pixels.shape();
    if shape.len() != 3 {
        return Err(Error::invalid(format!(
            "expected [H, W, C] pixels, got {shape:?}"
        )));
    }
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if h == 0 || w == 0 {
        return Err(Error::invalid("histogram needs a non-empty image"));
    }
    let mut out = Array::zeros(IxDyn(&[bins * c]));
    let norm = 1.0 / (h * w) as f64;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = pixels[[y, x, ch]].clamp(0.0, 1.0);
                let bin = ((v * bins as f64).floor() as usize).min(bins - 1);
                out[[ch * bins + bin]] += norm;
            }
        }
    }
    Ok(out)
}
