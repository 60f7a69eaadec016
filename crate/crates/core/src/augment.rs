//! Training-time augmentation.
//!
//! Fixed order: rescale (bilinear image, nearest mask), rotate by a
//! multiple of 90°, flip, color jitter (image only), random crop. Samples
//! smaller than the crop are reflect-padded, with `255` in the mask.

use image::imageops::{self, FilterType};
use image::{GrayImage, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::TileSample;
use crate::{Error, Result, IGNORE};

/// Maximum relative deltas of the color perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        ColorJitter {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
        }
    }
}

impl ColorJitter {
    pub const NONE: ColorJitter = ColorJitter {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub scale_range: (f64, f64),
    /// Allowed rotations in degrees, each a multiple of 90.
    pub rotations: Vec<u32>,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub color_jitter: ColorJitter,
    pub crop_size: u32,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_range: (0.5, 1.5),
            rotations: vec![0, 90, 180, 270],
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            color_jitter: ColorJitter::default(),
            crop_size: 512,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// A configuration that returns `crop_size` tiles unchanged.
    pub fn identity(crop_size: u32) -> Self {
        AugmentConfig {
            scale_range: (1.0, 1.0),
            rotations: vec![0],
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            color_jitter: ColorJitter::NONE,
            crop_size,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::validation(format!("augment.scale_range ({lo}, {hi}) must satisfy 0 < lo <= hi")));
        }
        if self.rotations.is_empty() || self.rotations.iter().any(|r| ![0, 90, 180, 270].contains(r)) {
            return Err(Error::validation(format!(
                "augment.rotations {:?} must be a non-empty subset of {{0, 90, 180, 270}}",
                self.rotations
            )));
        }
        for (name, p) in [("hflip_prob", self.hflip_prob), ("vflip_prob", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(format!("augment.{name} = {p} is not a probability")));
            }
        }
        let j = self.color_jitter;
        if [j.brightness, j.contrast, j.saturation].iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
            return Err(Error::validation("augment.color_jitter deltas must be >= 0"));
        }
        if self.crop_size < 1 {
            return Err(Error::validation("augment.crop_size must be >= 1"));
        }
        Ok(())
    }
}

/// Draws one augmentation of `sample`. The number of values drawn from
/// `rng` does not depend on the sample, so batches replay exactly.
pub fn augment<R: Rng + ?Sized>(sample: &TileSample, cfg: &AugmentConfig, rng: &mut R) -> TileSample {
    let scale = if cfg.scale_range.0 == cfg.scale_range.1 {
        rng.random::<f64>();
        cfg.scale_range.0
    } else {
        rng.random_range(cfg.scale_range.0..=cfg.scale_range.1)
    };
    let rotation = cfg.rotations[rng.random_range(0..cfg.rotations.len())];
    let hflip = rng.random::<f64>() < cfg.hflip_prob;
    let vflip = rng.random::<f64>() < cfg.vflip_prob;
    let mut factor = |delta: f64| 1.0 + delta * (2.0 * rng.random::<f64>() - 1.0);
    let jitter = [
        factor(cfg.color_jitter.brightness),
        factor(cfg.color_jitter.contrast),
        factor(cfg.color_jitter.saturation),
    ];
    let u_row = rng.random::<f64>();
    let u_col = rng.random::<f64>();

    let (mut image, mut mask) = rescale(&sample.image, &sample.mask, scale);
    (image, mask) = match rotation {
        90 => (imageops::rotate90(&image), imageops::rotate90(&mask)),
        180 => (imageops::rotate180(&image), imageops::rotate180(&mask)),
        270 => (imageops::rotate270(&image), imageops::rotate270(&mask)),
        _ => (image, mask),
    };
    if hflip {
        imageops::flip_horizontal_in_place(&mut image);
        imageops::flip_horizontal_in_place(&mut mask);
    }
    if vflip {
        imageops::flip_vertical_in_place(&mut image);
        imageops::flip_vertical_in_place(&mut mask);
    }
    if jitter != [1.0; 3] {
        color_jitter(&mut image, jitter);
    }
    let (image, mask) = random_crop(&image, &mask, cfg.crop_size, u_row, u_col);
    TileSample {
        image,
        mask,
        origin: sample.origin.clone(),
        resolution_m_per_px: sample.resolution_m_per_px / scale,
    }
}

fn rescale(image: &RgbImage, mask: &GrayImage, scale: f64) -> (RgbImage, GrayImage) {
    let (w, h) = image.dimensions();
    let nw = ((w as f64 * scale).round() as u32).max(1);
    let nh = ((h as f64 * scale).round() as u32).max(1);
    if (nw, nh) == (w, h) {
        return (image.clone(), mask.clone());
    }
    (
        imageops::resize(image, nw, nh, FilterType::Triangle),
        imageops::resize(mask, nw, nh, FilterType::Nearest),
    )
}

/// Brightness scales values, contrast scales the distance to the mean
/// luminance, saturation scales the distance to each pixel's luminance.
fn color_jitter(image: &mut RgbImage, [b, c, s]: [f64; 3]) {
    let luma = |p: [f64; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    let n = (image.width() * image.height()).max(1) as f64;
    let mean = image
        .pixels()
        .map(|p| luma(p.0.map(|v| v as f64 * b)))
        .sum::<f64>()
        / n;
    for p in image.pixels_mut() {
        let mut v = p.0.map(|v| v as f64 * b);
        v = v.map(|x| mean + (x - mean) * c);
        let g = luma(v);
        v = v.map(|x| g + (x - g) * s);
        *p = Rgb(v.map(|x| x.round().clamp(0.0, 255.0) as u8));
    }
}

/// Mirror index into `0..len` (edge pixel not repeated).
pub(crate) fn reflect(i: i64, len: u32) -> u32 {
    let n = len as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as u32
}

fn random_crop(image: &RgbImage, mask: &GrayImage, crop: u32, u_row: f64, u_col: f64) -> (RgbImage, GrayImage) {
    let (w, h) = image.dimensions();
    let (pw, ph) = (w.max(crop), h.max(crop));
    // padding is split evenly around the content
    let (px0, py0) = (((pw - w) / 2) as i64, ((ph - h) / 2) as i64);
    let x0 = ((u_col * (pw - crop + 1) as f64) as u32).min(pw - crop);
    let y0 = ((u_row * (ph - crop + 1) as f64) as u32).min(ph - crop);
    let mut out_img = RgbImage::new(crop, crop);
    let mut out_mask = GrayImage::new(crop, crop);
    for y in 0..crop {
        let sy = (y0 + y) as i64 - py0;
        for x in 0..crop {
            let sx = (x0 + x) as i64 - px0;
            let inside = sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64;
            let (rx, ry) = (reflect(sx, w), reflect(sy, h));
            out_img.put_pixel(x, y, *image.get_pixel(rx, ry));
            let m = if inside { mask.get_pixel(rx, ry).0[0] } else { IGNORE };
            out_mask.put_pixel(x, y, image::Luma([m]));
        }
    }
    (out_img, out_mask)
}
