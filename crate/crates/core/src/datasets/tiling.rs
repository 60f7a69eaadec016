use image::{GenericImageView, GrayImage, RgbImage};

use super::{TileOrigin, TileSample};

/// Number of full windows of `tile` pixels placed every `stride` pixels
/// along an axis of length `len`.
fn windows(len: u32, tile: u32, stride: u32) -> u32 {
    if tile == 0 || tile > len {
        0
    } else {
        (len - tile) / stride + 1
    }
}

/// Tiles produced by [`extract_tiles`] for an `h`×`w` image.
pub fn tile_count(h: u32, w: u32, tile: u32, stride: u32) -> usize {
    windows(h, tile, stride) as usize * windows(w, tile, stride) as usize
}

/// Cuts a sample into `tile`×`tile` windows on a regular grid. Windows that
/// would extend past the border are dropped. Tiles are pure copies; their
/// origin offsets are relative to `sample.origin`.
///
/// # Panics
///
/// If `stride` is zero.
pub fn extract_tiles(sample: &TileSample, tile: u32, stride: u32) -> Vec<TileSample> {
    assert!(stride >= 1, "stride must be positive");
    let (w, h) = sample.image.dimensions();
    let (ny, nx) = (windows(h, tile, stride), windows(w, tile, stride));
    let mut out = Vec::with_capacity((ny * nx) as usize);
    for ty in 0..ny {
        for tx in 0..nx {
            let (y0, x0) = (ty * stride, tx * stride);
            let image: RgbImage = sample.image.view(x0, y0, tile, tile).to_image();
            let mask: GrayImage = sample.mask.view(x0, y0, tile, tile).to_image();
            out.push(TileSample {
                image,
                mask,
                origin: TileOrigin {
                    dataset: sample.origin.dataset.clone(),
                    image_id: sample.origin.image_id.clone(),
                    row: sample.origin.row + y0,
                    col: sample.origin.col + x0,
                },
                resolution_m_per_px: sample.resolution_m_per_px,
            });
        }
    }
    out
}
