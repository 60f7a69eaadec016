//! The training objective.
//!
//! ```text
//! total = CE(f(x_t), y_t) + β · CE(f(x_s), pseudo(x_s)) + α(t) · MCC(f(x_s))
//! ```
//!
//! `x_t, y_t` is the labeled batch, `x_s` the unlabeled batch and
//! `pseudo(x_s)` optional teacher labels for it. MCC uses no labels and
//! can be moved onto the labeled batch with [`MccInput::Labeled`].

mod ce;
mod mcc;
mod schedule;

use serde::{Deserialize, Serialize};

pub use ce::{ce_ignore, ce_ignore_with_grad};
pub use mcc::{mcc_loss, mcc_loss_with_grad, order_free_sum, MccConfig};
pub use schedule::{alpha_at, AlphaSchedule, RampShape};

use crate::model::{ModelParams, SegmentationNet, Tensor4};
use crate::{Error, Result};

/// Which batch the MCC term sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MccInput {
    Labeled,
    #[default]
    Unlabeled,
}

/// Hyperparameters of the combined objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: AlphaSchedule,
    /// Weight of the pseudo-label cross-entropy.
    pub beta: f64,
    pub mcc: MccConfig,
    #[serde(default)]
    pub mcc_input: MccInput,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: AlphaSchedule::default(),
            beta: 1.0,
            mcc: MccConfig::default(),
            mcc_input: MccInput::Unlabeled,
        }
    }
}

impl LossConfig {
    /// The MCC term is switched off (neither evaluated nor logged) when
    /// its schedule can never be non-zero.
    pub fn mcc_enabled(&self) -> bool {
        self.alpha.alpha_max > 0.0
    }

    pub fn pseudo_enabled(&self) -> bool {
        self.beta > 0.0
    }
}

/// Components of the objective at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_labeled: f64,
    pub ce_pseudo: f64,
    pub mcc: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(ce_labeled: f64, ce_pseudo: f64, mcc: f64, alpha: f64, beta: f64) -> Self {
        LossBreakdown {
            ce_labeled,
            ce_pseudo,
            mcc,
            alpha,
            total: ce_labeled + beta * ce_pseudo + alpha * mcc,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.ce_labeled, self.ce_pseudo, self.mcc, self.alpha, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Normalized images with batch×H×W masks.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub images: Tensor4,
    pub masks: Vec<u8>,
}

/// Normalized images with optional teacher labels.
#[derive(Debug, Clone)]
pub struct UnlabeledBatch {
    pub images: Tensor4,
    pub pseudo_masks: Option<Vec<u8>>,
}

/// Evaluates the objective without gradients.
pub fn combined_loss(
    net: &dyn SegmentationNet,
    params: &ModelParams,
    labeled: &LabeledBatch,
    unlabeled: Option<&UnlabeledBatch>,
    iteration: u64,
    cfg: &LossConfig,
    subsample_seed: u64,
) -> Result<LossBreakdown> {
    evaluate(net, params, labeled, unlabeled, iteration, cfg, subsample_seed, None)
}

/// Evaluates the objective and accumulates its parameter gradient into
/// `grads`.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss_with_grad(
    net: &dyn SegmentationNet,
    params: &ModelParams,
    labeled: &LabeledBatch,
    unlabeled: Option<&UnlabeledBatch>,
    iteration: u64,
    cfg: &LossConfig,
    subsample_seed: u64,
    grads: &mut ModelParams,
) -> Result<LossBreakdown> {
    evaluate(net, params, labeled, unlabeled, iteration, cfg, subsample_seed, Some(grads))
}

fn check_batch(images: &Tensor4, masks: Option<&[u8]>, operand: &str) -> Result<()> {
    if let Some(m) = masks {
        let expected = images.batch() * images.height() * images.width();
        if m.len() != expected {
            return Err(Error::shape(format!(
                "{operand}: {} mask pixels for {expected} image pixels",
                m.len()
            )));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    net: &dyn SegmentationNet,
    params: &ModelParams,
    labeled: &LabeledBatch,
    unlabeled: Option<&UnlabeledBatch>,
    iteration: u64,
    cfg: &LossConfig,
    subsample_seed: u64,
    mut grads: Option<&mut ModelParams>,
) -> Result<LossBreakdown> {
    cfg.alpha.validate()?;
    check_batch(&labeled.images, Some(&labeled.masks), "labeled batch")?;
    let alpha = alpha_at(&cfg.alpha, iteration);

    let mcc_on_labeled = cfg.mcc_enabled() && cfg.mcc_input == MccInput::Labeled;
    let mut mcc_value = 0.0;
    let ce_labeled = if let Some(g) = grads.as_deref_mut() {
        let (logits, tape) = net.forward_train(params, &labeled.images)?;
        let mut dl = vec![0.0; logits.values().len()];
        let v = ce::ce_ignore_impl(&logits, &labeled.masks, "labeled batch", Some(&mut dl))?;
        if mcc_on_labeled {
            let mut gm = vec![0.0; dl.len()];
            mcc_value = mcc::mcc_impl(&logits, &cfg.mcc, subsample_seed, Some(&mut gm))?;
            for (a, b) in dl.iter_mut().zip(gm) {
                *a += alpha * b;
            }
        }
        net.backward(params, &tape, &dl, g)?;
        v
    } else {
        let logits = net.forward(params, &labeled.images)?;
        if mcc_on_labeled {
            mcc_value = mcc::mcc_impl(&logits, &cfg.mcc, subsample_seed, None)?;
        }
        ce::ce_ignore_impl(&logits, &labeled.masks, "labeled batch", None)?
    };

    let mut ce_pseudo = 0.0;
    if let Some(u) = unlabeled {
        check_batch(&u.images, u.pseudo_masks.as_deref(), "pseudo mask")?;
        let use_pseudo = u.pseudo_masks.is_some();
        let use_mcc = cfg.mcc_enabled() && cfg.mcc_input == MccInput::Unlabeled;
        if use_pseudo || use_mcc {
            let (logits, tape) = if grads.is_some() {
                let (l, t) = net.forward_train(params, &u.images)?;
                (l, Some(t))
            } else {
                (net.forward(params, &u.images)?, None)
            };
            let mut dl = grads.is_some().then(|| vec![0.0; logits.values().len()]);
            if let Some(mask) = &u.pseudo_masks {
                let mut g = dl.as_ref().map(|d| vec![0.0; d.len()]);
                ce_pseudo = ce::ce_ignore_impl(&logits, mask, "pseudo mask", g.as_deref_mut())?;
                if let (Some(d), Some(g)) = (dl.as_mut(), g) {
                    for (a, b) in d.iter_mut().zip(g) {
                        *a += cfg.beta * b;
                    }
                }
            }
            if use_mcc {
                let mut g = dl.as_ref().map(|d| vec![0.0; d.len()]);
                mcc_value = mcc::mcc_impl(&logits, &cfg.mcc, subsample_seed, g.as_deref_mut())?;
                if let (Some(d), Some(g)) = (dl.as_mut(), g) {
                    for (a, b) in d.iter_mut().zip(g) {
                        *a += alpha * b;
                    }
                }
            }
            if let (Some(gr), Some(tape), Some(d)) = (grads.as_deref_mut(), tape, dl) {
                if (use_pseudo && cfg.beta != 0.0) || (use_mcc && alpha != 0.0) {
                    net.backward(params, &tape, &d, gr)?;
                }
            }
        }
    }
    Ok(LossBreakdown::combine(ce_labeled, ce_pseudo, mcc_value, alpha, cfg.beta))
}
