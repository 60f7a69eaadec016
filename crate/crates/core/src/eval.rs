//! Road IoU and the cross-dataset transfer grid.
//!
//! IoU is accumulated over a whole evaluation set before dividing
//! (micro-IoU); ignore pixels count toward neither intersection nor union.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::augment::reflect;
use crate::datasets::TileSample;
use crate::model::ModelCheckpoint;
use crate::pseudolabel::{CheckpointTeacher, Teacher};
use crate::{Error, Result, IGNORE, ROAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IoUCounts {
    pub intersection_px: u64,
    pub union_px: u64,
    /// Pixels whose ground truth is not ignore.
    pub n_eval_px: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IoUResult {
    pub intersection_px: u64,
    pub union_px: u64,
    pub iou: f64,
    pub n_eval_px: u64,
}

impl IoUCounts {
    pub fn merge(self, o: IoUCounts) -> IoUCounts {
        IoUCounts {
            intersection_px: self.intersection_px + o.intersection_px,
            union_px: self.union_px + o.union_px,
            n_eval_px: self.n_eval_px + o.n_eval_px,
        }
    }

    pub fn result(self) -> IoUResult {
        IoUResult {
            intersection_px: self.intersection_px,
            union_px: self.union_px,
            iou: if self.union_px == 0 {
                1.0
            } else {
                self.intersection_px as f64 / self.union_px as f64
            },
            n_eval_px: self.n_eval_px,
        }
    }
}

impl IoUResult {
    pub fn counts(&self) -> IoUCounts {
        IoUCounts {
            intersection_px: self.intersection_px,
            union_px: self.union_px,
            n_eval_px: self.n_eval_px,
        }
    }

    /// Micro-average of several results.
    pub fn accumulate<'a>(parts: impl IntoIterator<Item = &'a IoUResult>) -> IoUResult {
        parts
            .into_iter()
            .fold(IoUCounts::default(), |a, r| a.merge(r.counts()))
            .result()
    }
}

/// Counts for hard predictions (`0`/`1`) against a mask over `0`, `1`, `255`.
pub fn road_iou_counts(pred: &[u8], gt: &[u8]) -> Result<IoUCounts> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = IoUCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        if p > ROAD {
            return Err(Error::validation(format!(
                "prediction contains {p}; predictions must be hard 0/1 labels"
            )));
        }
        if g == IGNORE {
            continue;
        }
        if g > ROAD {
            return Err(Error::validation(format!("ground truth contains {g}")));
        }
        c.n_eval_px += 1;
        let (p, g) = (p == ROAD, g == ROAD);
        c.intersection_px += (p && g) as u64;
        c.union_px += (p || g) as u64;
    }
    Ok(c)
}

pub fn road_iou(pred: &GrayImage, gt: &GrayImage) -> Result<IoUResult> {
    if pred.dimensions() != gt.dimensions() {
        return Err(Error::shape(format!(
            "prediction is {:?}, ground truth {:?}",
            pred.dimensions(),
            gt.dimensions()
        )));
    }
    Ok(road_iou_counts(pred.as_raw(), gt.as_raw())?.result())
}

/// Hard labels from a teacher's class probabilities.
pub fn predict_mask(model: &dyn Teacher, image: &RgbImage) -> Result<GrayImage> {
    let probs = model.class_probs(&TileSample {
        image: image.clone(),
        mask: GrayImage::new(image.width(), image.height()),
        origin: crate::datasets::TileOrigin::new("", ""),
        resolution_m_per_px: 1.0,
    })?;
    let labels = crate::model::argmax_labels(&probs);
    GrayImage::from_raw(image.width(), image.height(), labels)
        .ok_or_else(|| Error::shape("prediction size does not match the image"))
}

/// Micro-IoU of `model` over `samples`, each cut into a non-overlapping
/// `tile_size` grid. Border tiles are reflect-padded (image) and
/// `255`-padded (mask), so every labeled pixel is scored exactly once.
pub fn evaluate_with(model: &dyn Teacher, samples: &[TileSample], tile_size: u32) -> Result<IoUResult> {
    if tile_size == 0 {
        return Err(Error::validation("tile size must be positive"));
    }
    if samples.is_empty() {
        return Err(Error::validation("evaluation set is empty"));
    }
    let mut acc = IoUCounts::default();
    for s in samples {
        let (w, h) = s.image.dimensions();
        if s.mask.dimensions() != (w, h) {
            return Err(Error::shape("image and mask sizes differ"));
        }
        for y0 in (0..h).step_by(tile_size as usize) {
            for x0 in (0..w).step_by(tile_size as usize) {
                let (tw, th) = (tile_size.min(w - x0), tile_size.min(h - y0));
                let img = RgbImage::from_fn(tile_size, tile_size, |x, y| {
                    *s.image.get_pixel(x0 + reflect(x as i64, tw), y0 + reflect(y as i64, th))
                });
                let gt = GrayImage::from_fn(tile_size, tile_size, |x, y| {
                    if x < tw && y < th {
                        *s.mask.get_pixel(x0 + x, y0 + y)
                    } else {
                        image::Luma([IGNORE])
                    }
                });
                let pred = predict_mask(model, &img)?;
                acc = acc.merge(road_iou_counts(pred.as_raw(), gt.as_raw())?);
            }
        }
    }
    Ok(acc.result())
}

pub fn evaluate_checkpoint(checkpoint: &ModelCheckpoint, samples: &[TileSample], tile_size: u32) -> Result<IoUResult> {
    evaluate_with(&CheckpointTeacher::new(checkpoint.clone())?, samples, tile_size)
}

/// Warning text when evaluation data is at a different resolution than
/// the training data.
pub fn resolution_warning(train_res: f64, eval_set: &str, eval_res: f64) -> Option<String> {
    ((train_res - eval_res).abs() > 1e-9 * train_res.abs().max(1.0)).then(|| {
        format!("eval set {eval_set} is at {eval_res} m/px but the model was trained at {train_res} m/px")
    })
}

/// A named evaluation set at one resolution.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub name: String,
    pub resolution_m_per_px: f64,
    pub samples: Vec<TileSample>,
}

/// One cell of the grid: how to obtain its checkpoint.
pub struct GridCell<'a> {
    pub target_train: String,
    pub source: Option<String>,
    pub train_resolution_m_per_px: f64,
    pub checkpoint: Box<dyn FnOnce() -> Result<ModelCheckpoint> + 'a>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub target_train: String,
    pub source: Option<String>,
    pub eval_set: String,
    /// `None` when the cell failed.
    pub road_iou_pct: Option<f64>,
    pub negative_transfer: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    /// Checkpoint id per `target_train|source` cell.
    pub checkpoint_ids: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub rows: Vec<ReportRow>,
    pub metadata: ReportMeta,
}

pub const REPORT_HEADER: &str = "target_train,source,eval_set,road_iou_pct,negative_transfer_flag";

fn cell_key(target: &str, source: Option<&str>) -> String {
    format!("{target}|{}", source.unwrap_or("-"))
}

/// Trains or loads every cell, evaluates it on each eval set and flags
/// rows where adding a source lowered IoU below the source-free row of the
/// same target and eval set. A failing cell yields error rows; the grid
/// continues.
pub fn run_transfer_grid(
    cells: Vec<GridCell<'_>>,
    eval_sets: &[EvalSet],
    tile_size: u32,
    config_hash: &str,
) -> TransferReport {
    let mut meta = ReportMeta {
        config_hash: config_hash.to_string(),
        ..ReportMeta::default()
    };
    let mut rows = Vec::new();
    for cell in cells {
        let key = cell_key(&cell.target_train, cell.source.as_deref());
        let row = |eval_set: &str, iou: Result<f64>| ReportRow {
            target_train: cell.target_train.clone(),
            source: cell.source.clone(),
            eval_set: eval_set.to_string(),
            road_iou_pct: iou.as_ref().ok().copied(),
            negative_transfer: false,
            error: iou.err().map(|e| e.to_string()),
        };
        match (cell.checkpoint)() {
            Ok(ck) => {
                meta.checkpoint_ids.insert(key, ck.id());
                for set in eval_sets {
                    if let Some(w) = resolution_warning(cell.train_resolution_m_per_px, &set.name, set.resolution_m_per_px) {
                        if !meta.warnings.contains(&w) {
                            meta.warnings.push(w);
                        }
                    }
                    let r = evaluate_checkpoint(&ck, &set.samples, tile_size).map(|r| 100.0 * r.iou);
                    rows.push(row(&set.name, r));
                }
            }
            Err(e) => {
                log::warn!("grid cell {key} failed: {e}");
                let msg = e.to_string();
                for set in eval_sets {
                    rows.push(row(&set.name, Err(Error::Config(msg.clone()))));
                }
            }
        }
    }
    flag_negative_transfer(&mut rows);
    TransferReport { rows, metadata: meta }
}

/// Sets `negative_transfer` on rows with a source whose IoU is below the
/// matching source-free row.
pub fn flag_negative_transfer(rows: &mut [ReportRow]) {
    let baseline: BTreeMap<(String, String), f64> = rows
        .iter()
        .filter(|r| r.source.is_none())
        .filter_map(|r| Some(((r.target_train.clone(), r.eval_set.clone()), r.road_iou_pct?)))
        .collect();
    for r in rows.iter_mut() {
        r.negative_transfer = match (&r.source, r.road_iou_pct) {
            (Some(_), Some(v)) => baseline
                .get(&(r.target_train.clone(), r.eval_set.clone()))
                .is_some_and(|&b| v < b),
            _ => false,
        };
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl TransferReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let m = &self.metadata;
        let _ = writeln!(s, "# config_hash: {}", m.config_hash);
        let _ = writeln!(s, "# iou: micro (pixel counts summed over the eval set)");
        for (cell, id) in &m.checkpoint_ids {
            let _ = writeln!(s, "# checkpoint {cell}: {id}");
        }
        for w in &m.warnings {
            let _ = writeln!(s, "# warning: {w}");
        }
        for r in self.rows.iter().filter(|r| r.error.is_some()) {
            let _ = writeln!(
                s,
                "# error {} on {}: {}",
                cell_key(&r.target_train, r.source.as_deref()),
                r.eval_set,
                r.error.as_deref().unwrap_or_default().replace('\n', " ")
            );
        }
        let _ = writeln!(s, "{REPORT_HEADER}");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                csv_field(&r.target_train),
                csv_field(r.source.as_deref().unwrap_or("-")),
                csv_field(&r.eval_set),
                r.road_iou_pct.map_or("NA".to_string(), |v| format!("{v:.1}")),
                r.negative_transfer as u8
            );
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| target train | source | eval set | road IoU (%) | negative transfer |");
        let _ = writeln!(s, "|---|---|---|---:|:---:|");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                r.target_train,
                r.source.as_deref().unwrap_or("-"),
                r.eval_set,
                r.road_iou_pct.map_or("failed".to_string(), |v| format!("{v:.1}")),
                if r.negative_transfer { "yes" } else { "" }
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "Micro-IoU over all eval pixels. Config hash `{}`.", self.metadata.config_hash);
        for w in &self.metadata.warnings {
            let _ = writeln!(s, "\nWarning: {w}");
        }
        s
    }
}
