//! Semi-supervised domain adaptation for binary road segmentation.
//!
//! The crate covers the whole pipeline: dataset ingestion and tiling,
//! training-time augmentation, a small trainable encoder-decoder, the
//! combined objective (supervised cross-entropy, pseudo-label
//! cross-entropy and a ramped Minimum Class Confusion regularizer), the
//! optimization loop with resumable checkpoints, and cross-dataset IoU
//! evaluation.
//!
//! Masks use a three-symbol alphabet everywhere: `0` background, `1` road,
//! `255` ignore.

pub mod augment;
pub mod datasets;
mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod pseudolabel;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

/// Mask value for background pixels.
pub const BACKGROUND: u8 = 0;
/// Mask value for road pixels.
pub const ROAD: u8 = 1;
/// Mask value for pixels excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// True for values of the three-symbol mask alphabet.
#[inline]
pub fn is_mask_value(v: u8) -> bool {
    v == BACKGROUND || v == ROAD || v == IGNORE
}
