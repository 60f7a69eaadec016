//! Burns road centre-lines into a binary mask.
//!
//! Coordinates are in pixels with pixel `(col, row)` centred at
//! `(col + 0.5, row + 0.5)`. A pixel is road when its centre falls inside
//! a segment's stroke rectangle (half-open along and across the segment,
//! flat ends) or inside the round join disk at an interior vertex.

use std::path::Path;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, ROAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    /// `[x, y]` pixel coordinates.
    pub vertices: Vec<[f64; 2]>,
    /// Road width on the ground, meters.
    pub width_m: f64,
}

impl Polyline {
    pub fn new(vertices: Vec<[f64; 2]>, width_m: f64) -> Result<Self> {
        let p = Polyline { vertices, width_m };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.len() < 2 {
            return Err(Error::validation("polyline needs at least two vertices"));
        }
        if !(self.width_m > 0.0) {
            return Err(Error::validation("polyline width_m must be positive"));
        }
        Ok(())
    }
}

/// Stroke width in pixels for a road of `width_m` at the given ground
/// resolution.
pub fn stroke_px(width_m: f64, resolution_m_per_px: f64) -> u32 {
    ((width_m / resolution_m_per_px).round() as u32).max(1)
}

pub fn load_polylines(path: &Path) -> Result<Vec<Polyline>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<Polyline> = serde_json::from_str(&text)?;
    for l in &lines {
        l.validate()?;
    }
    Ok(lines)
}

fn burn_segment(mask: &mut GrayImage, a: [f64; 2], b: [f64; 2], half: f64) {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len = (dx * dx + dy * dy).sqrt();
    if len == 0.0 {
        return;
    }
    let (ux, uy) = (dx / len, dy / len);
    let (nx, ny) = (-uy, ux);
    let corners = [
        (a[0] + nx * half, a[1] + ny * half),
        (a[0] - nx * half, a[1] - ny * half),
        (b[0] + nx * half, b[1] + ny * half),
        (b[0] - nx * half, b[1] - ny * half),
    ];
    let (w, h) = mask.dimensions();
    let min_x = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let max_x = corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let max_y = corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let col0 = (min_x - 0.5).floor().max(0.0) as u32;
    let row0 = (min_y - 0.5).floor().max(0.0) as u32;
    let col1 = ((max_x - 0.5).ceil().max(-1.0) as i64).min(w as i64 - 1);
    let row1 = ((max_y - 0.5).ceil().max(-1.0) as i64).min(h as i64 - 1);
    for row in row0 as i64..=row1 {
        let qy = row as f64 + 0.5 - a[1];
        for col in col0 as i64..=col1 {
            let qx = col as f64 + 0.5 - a[0];
            let t = qx * ux + qy * uy;
            let s = qx * nx + qy * ny;
            if (0.0..len).contains(&t) && (-half..half).contains(&s) {
                mask.put_pixel(col as u32, row as u32, image::Luma([ROAD]));
            }
        }
    }
}

fn burn_disk(mask: &mut GrayImage, c: [f64; 2], r: f64) {
    let (w, h) = mask.dimensions();
    let row0 = (c[1] - r - 0.5).floor().max(0.0) as i64;
    let row1 = ((c[1] + r - 0.5).ceil() as i64).min(h as i64 - 1);
    let col0 = (c[0] - r - 0.5).floor().max(0.0) as i64;
    let col1 = ((c[0] + r - 0.5).ceil() as i64).min(w as i64 - 1);
    for row in row0..=row1 {
        for col in col0..=col1 {
            let (qx, qy) = (col as f64 + 0.5 - c[0], row as f64 + 0.5 - c[1]);
            if qx * qx + qy * qy < r * r {
                mask.put_pixel(col as u32, row as u32, image::Luma([ROAD]));
            }
        }
    }
}

/// Union of stroked polylines on a `height`×`width` raster; parts outside
/// the raster are clipped.
pub fn rasterize_roads(polylines: &[Polyline], height: u32, width: u32, resolution_m_per_px: f64) -> GrayImage {
    let mut mask = GrayImage::new(width, height);
    burn_roads(&mut mask, polylines, resolution_m_per_px);
    mask
}

/// Sets road pixels of `polylines` in an existing mask; other pixels are
/// left untouched.
pub fn burn_roads(mask: &mut GrayImage, polylines: &[Polyline], resolution_m_per_px: f64) {
    for line in polylines.iter().filter(|l| l.validate().is_ok()) {
        let half = stroke_px(line.width_m, resolution_m_per_px) as f64 / 2.0;
        for seg in line.vertices.windows(2) {
            burn_segment(mask, seg[0], seg[1], half);
        }
        for &v in &line.vertices[1..line.vertices.len() - 1] {
            burn_disk(mask, v, half);
        }
    }
}
