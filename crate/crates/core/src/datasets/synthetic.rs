//! Two-domain synthetic road benchmark.
//!
//! Each image has one to three random polyline roads over a textured
//! background with rectangular distractors. Geometry is drawn from a
//! stream that depends only on the seed, so styles `A` and `B` with the
//! same seed share identical roads and masks; the styles differ in
//! background palette, texture frequency and road contrast.

use std::f64::consts::PI;

use image::{GrayImage, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rasterize::{rasterize_roads, Polyline};
use super::{TileOrigin, TileSample};
use crate::{rng, ROAD};

/// Ground resolution of every synthetic image.
pub const SYNTHETIC_RESOLUTION: f64 = 1.0;
/// Accepted range of road-pixel fraction per image.
pub const ROAD_FRACTION: (f64, f64) = (0.01, 0.25);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Style {
    A,
    B,
}

impl Style {
    pub fn name(self) -> &'static str {
        match self {
            Style::A => "A",
            Style::B => "B",
        }
    }

    fn params(self) -> StyleParams {
        match self {
            Style::A => StyleParams {
                ground: [72.0, 108.0, 60.0],
                texture_amp: [22.0, 26.0, 18.0],
                texture_period: (14.0, 30.0),
                road: [150.0, 150.0, 142.0],
                road_amp: 10.0,
                distractor: [118.0, 104.0, 92.0],
                noise: 10.0,
            },
            Style::B => StyleParams {
                ground: [146.0, 126.0, 98.0],
                texture_amp: [20.0, 18.0, 16.0],
                texture_period: (4.0, 9.0),
                road: [172.0, 166.0, 150.0],
                road_amp: 12.0,
                distractor: [112.0, 96.0, 80.0],
                noise: 14.0,
            },
        }
    }
}

impl std::str::FromStr for Style {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Style::A),
            "B" | "b" => Ok(Style::B),
            _ => Err(format!("unknown style `{s}` (expected A or B)")),
        }
    }
}

struct StyleParams {
    ground: [f64; 3],
    texture_amp: [f64; 3],
    /// Range of grating periods in pixels.
    texture_period: (f64, f64),
    road: [f64; 3],
    road_amp: f64,
    distractor: [f64; 3],
    noise: f64,
}

fn border_point(rng: &mut ChaCha8Rng, side: u32, size: f64) -> [f64; 2] {
    let t = rng.random_range(0.1..0.9) * size;
    match side {
        0 => [t, 0.0],
        1 => [size, t],
        2 => [t, size],
        _ => [0.0, t],
    }
}

fn random_road(rng: &mut ChaCha8Rng, size: f64) -> Polyline {
    let s0 = rng.random_range(0..4u32);
    let s1 = (s0 + rng.random_range(1..4u32)) % 4;
    let a = border_point(rng, s0, size);
    let b = border_point(rng, s1, size);
    let mut vertices = vec![a];
    let bends = rng.random_range(0..3u32);
    for k in 1..=bends {
        let t = k as f64 / (bends + 1) as f64;
        let jitter = size * 0.15;
        vertices.push([
            (a[0] + (b[0] - a[0]) * t + rng.random_range(-jitter..jitter)).clamp(0.0, size),
            (a[1] + (b[1] - a[1]) * t + rng.random_range(-jitter..jitter)).clamp(0.0, size),
        ]);
    }
    vertices.push(b);
    Polyline {
        vertices,
        width_m: rng.random_range(2.0..6.0),
    }
}

/// Draws road layouts until the road fraction is in [`ROAD_FRACTION`].
fn road_layout(rng: &mut ChaCha8Rng, size: u32) -> (Vec<Polyline>, GrayImage) {
    let total = (size as f64) * (size as f64);
    loop {
        let n = rng.random_range(1..=3);
        let lines: Vec<Polyline> = (0..n).map(|_| random_road(rng, size as f64)).collect();
        let mask = rasterize_roads(&lines, size, size, SYNTHETIC_RESOLUTION);
        let frac = mask.iter().filter(|&&v| v == ROAD).count() as f64 / total;
        if (ROAD_FRACTION.0..=ROAD_FRACTION.1).contains(&frac) {
            return (lines, mask);
        }
    }
}

struct Grating {
    kx: f64,
    ky: f64,
    phase: f64,
}

fn gratings(rng: &mut ChaCha8Rng, period: (f64, f64), n: usize) -> Vec<Grating> {
    (0..n)
        .map(|_| {
            let p = rng.random_range(period.0..period.1);
            let theta = rng.random_range(0.0..PI);
            Grating {
                kx: 2.0 * PI * theta.cos() / p,
                ky: 2.0 * PI * theta.sin() / p,
                phase: rng.random_range(0.0..2.0 * PI),
            }
        })
        .collect()
}

fn texture(g: &[Grating], x: f64, y: f64) -> f64 {
    g.iter().map(|g| (g.kx * x + g.ky * y + g.phase).sin()).sum::<f64>() / g.len() as f64
}

fn paint(rng: &mut ChaCha8Rng, style: StyleParams, mask: &GrayImage) -> RgbImage {
    let (w, h) = mask.dimensions();
    let ground = gratings(rng, style.texture_period, 3);
    let road_tex = gratings(rng, (6.0, 16.0), 2);
    let n_boxes = rng.random_range(0..4);
    let boxes: Vec<(f64, f64, f64, f64)> = (0..n_boxes)
        .map(|_| {
            let bw = rng.random_range(0.08..0.25) * w as f64;
            let bh = rng.random_range(0.08..0.25) * h as f64;
            let x0 = rng.random_range(0.0..w as f64 - bw);
            let y0 = rng.random_range(0.0..h as f64 - bh);
            (x0, y0, x0 + bw, y0 + bh)
        })
        .collect();
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let road = mask.get_pixel(x, y).0[0] == ROAD;
            let in_box = boxes
                .iter()
                .any(|&(x0, y0, x1, y1)| fx >= x0 && fx < x1 && fy >= y0 && fy < y1);
            let mut px = [0u8; 3];
            let tg = texture(&ground, fx, fy);
            let tr = texture(&road_tex, fx, fy);
            for c in 0..3 {
                let base = if road {
                    style.road[c] + style.road_amp * tr
                } else if in_box {
                    style.distractor[c] + 0.5 * style.texture_amp[c] * tg
                } else {
                    style.ground[c] + style.texture_amp[c] * tg
                };
                let noise = rng.random_range(-1.0..1.0) * style.noise;
                px[c] = (base + noise).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x, y, image::Rgb(px));
        }
    }
    img
}

/// Generates `n_images` square samples of `size` pixels. Deterministic in
/// `(style, seed)`; road geometry depends on `seed` only.
pub fn generate_synthetic_domain(style: Style, n_images: usize, size: u32, seed: u64) -> Vec<TileSample> {
    generate_synthetic_scenes(style, n_images, size, seed)
        .into_iter()
        .map(|(s, _)| s)
        .collect()
}

/// Like [`generate_synthetic_domain`], also returning each image's road
/// centre-lines.
pub fn generate_synthetic_scenes(
    style: Style,
    n_images: usize,
    size: u32,
    seed: u64,
) -> Vec<(TileSample, Vec<Polyline>)> {
    let mut geom = rng::stream(seed, rng::STREAM_SYNTH_GEOMETRY);
    let mut tex = rng::stream(seed ^ style_salt(style), rng::STREAM_SYNTH_TEXTURE);
    (0..n_images)
        .map(|i| {
            let (lines, mask) = road_layout(&mut geom, size);
            let image = paint(&mut tex, style.params(), &mask);
            let sample = TileSample {
                image,
                mask,
                origin: TileOrigin::new(
                    format!("synthetic-{}", style.name()),
                    format!("{}{seed}_{i:05}", style.name().to_lowercase()),
                ),
                resolution_m_per_px: SYNTHETIC_RESOLUTION,
            };
            (sample, lines)
        })
        .collect()
}

fn style_salt(style: Style) -> u64 {
    match style {
        Style::A => 0,
        Style::B => 0x9e37_79b9_7f4a_7c15,
    }
}
