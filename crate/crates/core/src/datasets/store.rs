//! On-disk tile store: one directory holding `{id}_img.png`,
//! `{id}_mask.png` and an `index.json` describing the tiles.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_gray, load_rgb, save_png_gray, save_png_rgb, Role, TileOrigin, TileSample};
use crate::model::Normalization;
use crate::{Error, Result};

pub const INDEX_FILE: &str = "index.json";

/// Stable file-name stem for a tile.
pub fn tile_id(origin: &TileOrigin) -> String {
    format!("{}_r{:05}_c{:05}", origin.image_id, origin.row, origin.col)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileStoreIndex {
    pub dataset: String,
    pub role: Role,
    pub resolution_m_per_px: f64,
    pub tile_size: u32,
    pub stride: u32,
    /// Channel statistics of the stored images.
    pub normalization: Normalization,
    pub tiles: Vec<TileOrigin>,
}

#[derive(Debug, Clone)]
pub struct TileStore {
    dir: PathBuf,
    index: TileStoreIndex,
}

impl TileStore {
    /// Writes `tiles` to `dir`. An existing index is only replaced when
    /// `force` is set.
    pub fn create(
        dir: &Path,
        dataset: &str,
        role: Role,
        tile_size: u32,
        stride: u32,
        tiles: &[TileSample],
        force: bool,
    ) -> Result<TileStore> {
        let index_path = dir.join(INDEX_FILE);
        if index_path.exists() && !force {
            return Err(Error::validation(format!(
                "{} already exists (use --force to overwrite)",
                index_path.display()
            )));
        }
        let first = tiles
            .first()
            .ok_or_else(|| Error::validation(format!("{dataset}: no tiles to store")))?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for t in tiles {
            if t.image.dimensions() != (tile_size, tile_size) || t.mask.dimensions() != (tile_size, tile_size) {
                return Err(Error::shape(format!("tile {} is not {tile_size}x{tile_size}", tile_id(&t.origin))));
            }
            if t.resolution_m_per_px != first.resolution_m_per_px {
                return Err(Error::validation(format!("{dataset}: tiles at mixed resolutions")));
            }
            let id = tile_id(&t.origin);
            save_png_rgb(&t.image, &dir.join(format!("{id}_img.png")))?;
            save_png_gray(&t.mask, &dir.join(format!("{id}_mask.png")))?;
        }
        let index = TileStoreIndex {
            dataset: dataset.to_string(),
            role,
            resolution_m_per_px: first.resolution_m_per_px,
            tile_size,
            stride,
            normalization: Normalization::from_images(tiles.iter().map(|t| &t.image)),
            tiles: tiles.iter().map(|t| t.origin.clone()).collect(),
        };
        let text = serde_json::to_string_pretty(&index)?;
        std::fs::write(&index_path, text + "\n").map_err(|e| Error::io(&index_path, e))?;
        Ok(TileStore { dir: dir.to_path_buf(), index })
    }

    pub fn open(dir: &Path) -> Result<TileStore> {
        let path = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let index: TileStoreIndex = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            path: path.clone(),
            key: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        Ok(TileStore { dir: dir.to_path_buf(), index })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn index(&self) -> &TileStoreIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.index.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.tiles.is_empty()
    }

    pub fn load(&self, i: usize) -> Result<TileSample> {
        let origin = self
            .index
            .tiles
            .get(i)
            .ok_or_else(|| Error::validation(format!("tile {i} out of range")))?
            .clone();
        let id = tile_id(&origin);
        let image = load_rgb(&self.dir.join(format!("{id}_img.png")))?;
        let mask = load_gray(&self.dir.join(format!("{id}_mask.png")))?;
        if image.dimensions() != mask.dimensions() {
            return Err(Error::shape(format!("tile {id}: image and mask sizes differ")));
        }
        Ok(TileSample {
            image,
            mask,
            origin,
            resolution_m_per_px: self.index.resolution_m_per_px,
        })
    }

    pub fn load_all(&self) -> Result<Vec<TileSample>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}
