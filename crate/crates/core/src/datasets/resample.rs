use image::{GrayImage, RgbImage};

use super::TileSample;
use crate::{Error, Result};

/// Source pixels (index, coverage weight) contributing to each output
/// pixel when an axis of `src` pixels is shrunk by `factor`.
fn area_weights(src: u32, dst: u32, factor: f64) -> Vec<Vec<(u32, f64)>> {
    (0..dst)
        .map(|o| {
            let lo = o as f64 * factor;
            let hi = ((o + 1) as f64 * factor).min(src as f64);
            let mut taps = Vec::new();
            let mut i = lo.floor() as u32;
            while (i as f64) < hi && i < src {
                let cover = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if cover > 0.0 {
                    taps.push((i, cover));
                }
                i += 1;
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Area-averaging downscale of an RGB image to `dst_w`×`dst_h`.
pub fn downscale_area(img: &RgbImage, dst_w: u32, dst_h: u32, factor: f64) -> RgbImage {
    let (w, h) = img.dimensions();
    let xs = area_weights(w, dst_w, factor);
    let ys = area_weights(h, dst_h, factor);
    RgbImage::from_fn(dst_w, dst_h, |ox, oy| {
        let mut acc = [0f64; 3];
        for &(sy, wy) in &ys[oy as usize] {
            for &(sx, wx) in &xs[ox as usize] {
                let p = img.get_pixel(sx, sy).0;
                for c in 0..3 {
                    acc[c] += wy * wx * p[c] as f64;
                }
            }
        }
        image::Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

/// Nearest-neighbour resize: output pixel centres sample the source pixel
/// containing them. Keeps the label alphabet closed.
pub fn resize_nearest(mask: &GrayImage, dst_w: u32, dst_h: u32) -> GrayImage {
    let (w, h) = mask.dimensions();
    let fx = w as f64 / dst_w as f64;
    let fy = h as f64 / dst_h as f64;
    GrayImage::from_fn(dst_w, dst_h, |ox, oy| {
        let sx = (((ox as f64 + 0.5) * fx) as u32).min(w - 1);
        let sy = (((oy as f64 + 0.5) * fy) as u32).min(h - 1);
        *mask.get_pixel(sx, sy)
    })
}

/// Downsamples a sample to a coarser ground resolution: area averaging
/// for the image, nearest neighbour for the mask.
pub fn harmonize_resolution(tile: &TileSample, target_res: f64) -> Result<TileSample> {
    let factor = target_res / tile.resolution_m_per_px;
    if !factor.is_finite() || factor < 1.0 - 1e-9 {
        return Err(Error::Unsupported(format!(
            "upscaling from {} to {} m/px",
            tile.resolution_m_per_px, target_res
        )));
    }
    if (factor - 1.0).abs() <= 1e-9 {
        return Ok(tile.clone());
    }
    let (w, h) = tile.image.dimensions();
    let dst_w = ((w as f64 / factor).round() as u32).max(1);
    let dst_h = ((h as f64 / factor).round() as u32).max(1);
    Ok(TileSample {
        image: downscale_area(&tile.image, dst_w, dst_h, factor),
        mask: resize_nearest(&tile.mask, dst_w, dst_h),
        origin: tile.origin.clone(),
        resolution_m_per_px: target_res,
    })
}
