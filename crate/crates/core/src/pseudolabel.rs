//! Teacher pseudo-labels for unlabeled tiles.
//!
//! Each pixel gets the teacher's argmax class; pixels whose maximum class
//! probability is below the threshold become `255`. Maps are generated
//! once from a named checkpoint and persisted next to the tile store.

use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::datasets::{load_gray, save_png_gray, tile_id, TileOrigin, TileSample};
use crate::model::{build, predict_image, LogitMap, ModelCheckpoint, ModelParams, SegmentationNet};
use crate::{Error, Result, IGNORE};

pub const INDEX_FILE: &str = "index.json";
pub const DEFAULT_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMap {
    pub origin: TileOrigin,
    pub mask: GrayImage,
    /// Maximum class probability per pixel, row-major.
    pub confidence: Vec<f32>,
    pub teacher_checkpoint_id: String,
    pub threshold: f64,
}

/// Anything that assigns class probabilities to a tile.
pub trait Teacher {
    fn checkpoint_id(&self) -> String;

    /// Probabilities with shape `1×C×H×W` matching the tile.
    fn class_probs(&self, tile: &TileSample) -> Result<LogitMap>;
}

/// A trained network used as teacher.
pub struct CheckpointTeacher {
    id: String,
    checkpoint: ModelCheckpoint,
    net: Box<dyn SegmentationNet>,
}

impl CheckpointTeacher {
    pub fn new(checkpoint: ModelCheckpoint) -> Result<Self> {
        let (_, net) = build(&checkpoint.model)?;
        Ok(CheckpointTeacher {
            id: checkpoint.id(),
            checkpoint,
            net,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(ModelCheckpoint::load(path)?)
    }

    pub fn params(&self) -> &ModelParams {
        &self.checkpoint.params
    }
}

impl Teacher for CheckpointTeacher {
    fn checkpoint_id(&self) -> String {
        self.id.clone()
    }

    fn class_probs(&self, tile: &TileSample) -> Result<LogitMap> {
        predict_image(
            self.net.as_ref(),
            &self.checkpoint.params,
            &self.checkpoint.normalization,
            &tile.image,
        )
    }
}

fn validate_threshold(threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::validation(format!("pseudo-label threshold {threshold} is outside [0, 1]")));
    }
    Ok(())
}

/// Thresholded argmax of one probability map.
pub fn pseudo_label_from_probs(
    probs: &LogitMap,
    origin: TileOrigin,
    teacher_checkpoint_id: &str,
    threshold: f64,
) -> Result<PseudoLabelMap> {
    validate_threshold(threshold)?;
    let [b, nc, h, w] = probs.shape();
    if b != 1 {
        return Err(Error::shape(format!("expected one probability map, got {b}")));
    }
    let mut mask = GrayImage::new(w as u32, h as u32);
    let mut confidence = Vec::with_capacity(h * w);
    for (p, m) in mask.iter_mut().enumerate() {
        let (mut best, mut best_v) = (0usize, f64::NEG_INFINITY);
        for (c, v) in probs.pixel(0, p).enumerate() {
            if v > best_v {
                best = c;
                best_v = v;
            }
        }
        debug_assert!(best < nc);
        *m = if best_v < threshold { IGNORE } else { best as u8 };
        confidence.push(best_v as f32);
    }
    Ok(PseudoLabelMap {
        origin,
        mask,
        confidence,
        teacher_checkpoint_id: teacher_checkpoint_id.to_string(),
        threshold,
    })
}

pub fn generate_pseudo_labels(
    teacher: &dyn Teacher,
    tiles: &[TileSample],
    threshold: f64,
) -> Result<Vec<PseudoLabelMap>> {
    validate_threshold(threshold)?;
    let id = teacher.checkpoint_id();
    tiles
        .iter()
        .map(|t| {
            let probs = teacher.class_probs(t)?;
            let [_, _, h, w] = probs.shape();
            if (w as u32, h as u32) != t.image.dimensions() {
                return Err(Error::shape(format!(
                    "teacher returned {h}x{w} probabilities for a {:?} tile",
                    t.image.dimensions()
                )));
            }
            pseudo_label_from_probs(&probs, t.origin.clone(), &id, threshold)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelStats {
    /// Share of pixels that are not `255`.
    pub kept_fraction: f64,
    /// Share of kept pixels labeled road (0 when nothing is kept).
    pub road_fraction: f64,
    /// Per map: counts of background, road and ignore pixels.
    pub per_image_histogram: Vec<[u64; 3]>,
}

pub fn pseudo_label_stats(maps: &[PseudoLabelMap]) -> Result<PseudoLabelStats> {
    if maps.is_empty() {
        return Err(Error::validation("no pseudo-label maps"));
    }
    let per_image_histogram: Vec<[u64; 3]> = maps
        .iter()
        .map(|m| {
            let mut h = [0u64; 3];
            for &v in m.mask.iter() {
                match v {
                    0 => h[0] += 1,
                    1 => h[1] += 1,
                    _ => h[2] += 1,
                }
            }
            h
        })
        .collect();
    let total: [u64; 3] = per_image_histogram
        .iter()
        .fold([0; 3], |a, h| [a[0] + h[0], a[1] + h[1], a[2] + h[2]]);
    let kept = total[0] + total[1];
    let all = kept + total[2];
    Ok(PseudoLabelStats {
        kept_fraction: if all == 0 { 0.0 } else { kept as f64 / all as f64 },
        road_fraction: if kept == 0 { 0.0 } else { total[1] as f64 / kept as f64 },
        per_image_histogram,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoStoreIndex {
    pub teacher_checkpoint_id: String,
    pub threshold: f64,
    pub tiles: Vec<TileOrigin>,
}

/// On-disk pseudo-labels: `{id}_pseudo.png`, `{id}_conf.png` (confidence
/// scaled to 0..255) and `index.json`.
#[derive(Debug, Clone)]
pub struct PseudoLabelStore {
    dir: PathBuf,
    index: PseudoStoreIndex,
}

impl PseudoLabelStore {
    pub fn create(dir: &Path, maps: &[PseudoLabelMap], force: bool) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::validation("no pseudo-label maps to store"))?;
        let index_path = dir.join(INDEX_FILE);
        if index_path.exists() && !force {
            return Err(Error::validation(format!(
                "{} already exists (use --force to overwrite)",
                index_path.display()
            )));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for m in maps {
            if m.teacher_checkpoint_id != first.teacher_checkpoint_id || m.threshold != first.threshold {
                return Err(Error::validation("pseudo-label maps come from different teachers or thresholds"));
            }
            let id = tile_id(&m.origin);
            save_png_gray(&m.mask, &dir.join(format!("{id}_pseudo.png")))?;
            let conf = GrayImage::from_vec(
                m.mask.width(),
                m.mask.height(),
                m.confidence.iter().map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8).collect(),
            )
            .ok_or_else(|| Error::shape(format!("confidence of {id} does not match its mask")))?;
            save_png_gray(&conf, &dir.join(format!("{id}_conf.png")))?;
        }
        let index = PseudoStoreIndex {
            teacher_checkpoint_id: first.teacher_checkpoint_id.clone(),
            threshold: first.threshold,
            tiles: maps.iter().map(|m| m.origin.clone()).collect(),
        };
        std::fs::write(&index_path, serde_json::to_string_pretty(&index)? + "\n")
            .map_err(|e| Error::io(&index_path, e))?;
        Ok(PseudoLabelStore { dir: dir.to_path_buf(), index })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        if !path.exists() {
            return Err(Error::Config(format!("no pseudo-label store at {}", dir.display())));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: PseudoStoreIndex = serde_json::from_str(&text)?;
        Ok(PseudoLabelStore { dir: dir.to_path_buf(), index })
    }

    pub fn index(&self) -> &PseudoStoreIndex {
        &self.index
    }

    /// Pseudo mask for the tile with the given origin.
    pub fn mask(&self, origin: &TileOrigin) -> Result<GrayImage> {
        let id = tile_id(origin);
        let p = self.dir.join(format!("{id}_pseudo.png"));
        if !p.exists() {
            return Err(Error::Config(format!("pseudo-label store {} has no tile {id}", self.dir.display())));
        }
        load_gray(&p)
    }

    /// Loads every map; confidences carry the 8-bit quantization.
    pub fn load_all(&self) -> Result<Vec<PseudoLabelMap>> {
        self.index
            .tiles
            .iter()
            .map(|o| {
                let id = tile_id(o);
                let conf = load_gray(&self.dir.join(format!("{id}_conf.png")))?;
                Ok(PseudoLabelMap {
                    origin: o.clone(),
                    mask: self.mask(o)?,
                    confidence: conf.iter().map(|&v| v as f32 / 255.0).collect(),
                    teacher_checkpoint_id: self.index.teacher_checkpoint_id.clone(),
                    threshold: self.index.threshold,
                })
            })
            .collect()
    }
}
