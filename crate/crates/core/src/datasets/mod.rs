//! Dataset ingestion: manifests, label reduction, vector rasterization,
//! resolution harmonization, tiling, tile stores and the synthetic
//! two-domain benchmark.

mod labels;
mod manifest;
mod rasterize;
mod resample;
mod store;
mod synthetic;
mod tiling;

use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

pub use labels::reduce_labels;
pub use manifest::{parse_manifest, DatasetManifest, Role, SamplePath};
pub use rasterize::{burn_roads, load_polylines, rasterize_roads, stroke_px, Polyline};
pub use resample::{downscale_area, harmonize_resolution, resize_nearest};
pub use store::{tile_id, TileStore, TileStoreIndex, INDEX_FILE};
pub use synthetic::{generate_synthetic_domain, generate_synthetic_scenes, Style, ROAD_FRACTION, SYNTHETIC_RESOLUTION};
pub use tiling::{extract_tiles, tile_count};

use crate::{Error, Result, IGNORE};

/// Where a tile came from: dataset, source image and pixel offset of its
/// top-left corner in that image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileOrigin {
    pub dataset: String,
    pub image_id: String,
    pub row: u32,
    pub col: u32,
}

impl TileOrigin {
    pub fn new(dataset: impl Into<String>, image_id: impl Into<String>) -> Self {
        TileOrigin {
            dataset: dataset.into(),
            image_id: image_id.into(),
            row: 0,
            col: 0,
        }
    }
}

/// An RGB image with its reduced mask (values `0`, `1`, `255`).
#[derive(Debug, Clone, PartialEq)]
pub struct TileSample {
    pub image: RgbImage,
    pub mask: GrayImage,
    pub origin: TileOrigin,
    pub resolution_m_per_px: f64,
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.into_rgb8())
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Loads a single-band label raster. 16-bit rasters are accepted as long
/// as every value fits in a byte.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(g),
        other => {
            let wide = other.into_luma16();
            let (w, h) = wide.dimensions();
            let mut out = GrayImage::new(w, h);
            for (o, v) in out.iter_mut().zip(wide.iter()) {
                *o = u8::try_from(*v).map_err(|_| {
                    Error::validation(format!("{}: label id {v} exceeds 255", path.display()))
                })?;
            }
            Ok(out)
        }
    }
}

pub fn save_png_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn save_png_gray(img: &GrayImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Loads one manifest sample at its native resolution. The mask is the
/// reduced label raster with road vectors burned on top; samples without
/// labels get an all-ignore mask.
pub fn load_sample(manifest: &DatasetManifest, sample: &SamplePath) -> Result<TileSample> {
    let image = load_rgb(&sample.image_path)?;
    let (w, h) = image.dimensions();
    let mut mask = match &sample.mask_path {
        Some(p) => {
            let raw = load_gray(p)?;
            if raw.dimensions() != (w, h) {
                return Err(Error::shape(format!(
                    "mask {} is {:?}, image is {:?}",
                    p.display(),
                    raw.dimensions(),
                    (w, h)
                )));
            }
            reduce_labels(&raw, &manifest.road_class_ids, &manifest.nodata_ids)
        }
        None if sample.vector_roads_path.is_some() => GrayImage::new(w, h),
        None => GrayImage::from_pixel(w, h, image::Luma([IGNORE])),
    };
    if let Some(p) = &sample.vector_roads_path {
        burn_roads(&mut mask, &load_polylines(p)?, manifest.resolution_m_per_px);
    }
    Ok(TileSample {
        image,
        mask,
        origin: TileOrigin::new(manifest.name.clone(), sample.id()),
        resolution_m_per_px: manifest.resolution_m_per_px,
    })
}

/// Loads, harmonizes and tiles every sample of one split.
pub fn prepare_split(
    manifest: &DatasetManifest,
    split: &str,
    target_res: f64,
    tile: u32,
    stride: u32,
) -> Result<Vec<TileSample>> {
    if tile == 0 || stride == 0 {
        return Err(Error::validation("tile size and stride must be positive"));
    }
    let mut out = Vec::new();
    for s in manifest.split(split)? {
        let sample = harmonize_resolution(&load_sample(manifest, s)?, target_res)?;
        out.extend(extract_tiles(&sample, tile, stride));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, BTreeSet};

    #[test]
    fn vector_roads_are_burned_over_raster_labels() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_pixel(16, 16, image::Rgb([9, 9, 9]));
        save_png_rgb(&img, &dir.path().join("a.png")).unwrap();
        let mut raw = GrayImage::new(16, 16);
        raw.put_pixel(0, 0, image::Luma([7]));
        save_png_gray(&raw, &dir.path().join("a_lbl.png")).unwrap();
        let roads = serde_json::json!([{"vertices": [[0.0, 8.0], [16.0, 8.0]], "width_m": 2.0}]);
        std::fs::write(dir.path().join("a.json"), roads.to_string()).unwrap();
        let m = DatasetManifest {
            name: "d".into(),
            resolution_m_per_px: 1.0,
            role: Role::LabeledTarget,
            splits: BTreeMap::from([(
                "train".to_string(),
                vec![SamplePath {
                    image_path: "a.png".into(),
                    mask_path: Some("a_lbl.png".into()),
                    vector_roads_path: Some("a.json".into()),
                }],
            )]),
            road_class_ids: BTreeSet::new(),
            nodata_ids: BTreeSet::from([7]),
        };
        m.write(&dir.path().join("m.json")).unwrap();
        let m = parse_manifest(&dir.path().join("m.json")).unwrap();
        let tiles = prepare_split(&m, "train", 1.0, 8, 8).unwrap();
        assert_eq!(tiles.len(), 4);
        let s = load_sample(&m, &m.split("train").unwrap()[0]).unwrap();
        assert_eq!(s.mask.get_pixel(0, 0).0[0], IGNORE);
        assert_eq!(s.mask.iter().filter(|&&v| v == crate::ROAD).count(), 32);
    }

    #[test]
    fn unlabeled_samples_get_ignore_masks() {
        let dir = tempfile::tempdir().unwrap();
        save_png_rgb(&RgbImage::new(4, 4), &dir.path().join("u.png")).unwrap();
        let m = DatasetManifest {
            name: "u".into(),
            resolution_m_per_px: 1.0,
            role: Role::UnlabeledSource,
            splits: BTreeMap::from([(
                "train".to_string(),
                vec![SamplePath { image_path: dir.path().join("u.png"), mask_path: None, vector_roads_path: None }],
            )]),
            road_class_ids: BTreeSet::new(),
            nodata_ids: BTreeSet::new(),
        };
        let s = load_sample(&m, &m.splits["train"][0]).unwrap();
        assert!(s.mask.iter().all(|&v| v == IGNORE));
    }
}
