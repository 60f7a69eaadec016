use std::collections::BTreeSet;

use image::GrayImage;

use crate::{BACKGROUND, IGNORE, ROAD};

/// Collapses a multi-class label raster to road / background / ignore.
///
/// A pixel becomes `1` when its raw id is in `road_ids`, `255` when it is
/// in `nodata_ids` and `0` otherwise.
pub fn reduce_labels(raw: &GrayImage, road_ids: &BTreeSet<u32>, nodata_ids: &BTreeSet<u32>) -> GrayImage {
    let mut lut = [BACKGROUND; 256];
    for (v, slot) in lut.iter_mut().enumerate() {
        let v = v as u32;
        if road_ids.contains(&v) {
            *slot = ROAD;
        } else if nodata_ids.contains(&v) {
            *slot = IGNORE;
        }
    }
    let mut out = raw.clone();
    for p in out.iter_mut() {
        *p = lut[*p as usize];
    }
    out
}
