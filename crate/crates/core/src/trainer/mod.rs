//! Optimization loop for supervised and semi-supervised training.
//!
//! Every step draws a labeled batch (and, for adaptation, an unlabeled
//! batch) by sampling tiles with replacement and augmenting them, then
//! applies one AdamW update on the combined objective. Index sampling and
//! augmentation use four independent random streams, so switching a loss
//! term on or off never changes the batches of the other stream.

mod optim;

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use image::{GrayImage, Luma};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{AdamW, OptimizerKind};

use crate::augment::{augment, AugmentConfig};
use crate::datasets::{Role, TileOrigin, TileSample};
use crate::losses::{
    alpha_at, combined_loss_with_grad, AlphaSchedule, LabeledBatch, LossBreakdown, LossConfig, MccConfig, MccInput,
    UnlabeledBatch,
};
use crate::model::archive::{read_archive, write_archive};
use crate::model::{build, ModelCheckpoint, ModelConfig, ModelParams, Normalization, ParamTensor, SegmentationNet};
use crate::pseudolabel::{PseudoLabelMap, DEFAULT_THRESHOLD};
use crate::rng::{self, RngState};
use crate::{Error, Result, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `learning_rate` to 0 over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub alpha_schedule: AlphaSchedule,
    pub beta: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub mcc: MccConfig,
    /// Dataset role whose batch the MCC term is applied to.
    #[serde(default = "default_mcc_role")]
    pub mcc_role: Role,
    pub pseudo_threshold: f64,
}

fn default_mcc_role() -> Role {
    Role::UnlabeledSource
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 300_000,
            batch_labeled: 6,
            batch_unlabeled: 6,
            learning_rate: 1e-4,
            lr_schedule: LrSchedule::Constant,
            weight_decay: 0.01,
            optimizer: OptimizerKind::Adamw,
            alpha_schedule: AlphaSchedule::for_run(300_000),
            beta: 1.0,
            seed: 0,
            checkpoint_every: 10_000,
            mcc: MccConfig::default(),
            mcc_role: Role::UnlabeledSource,
            pseudo_threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    /// Small-batch settings for CPU runs of `total_iters` steps.
    pub fn desk(total_iters: u64) -> Self {
        TrainConfig {
            total_iters,
            batch_labeled: 4,
            batch_unlabeled: 4,
            learning_rate: 1e-3,
            alpha_schedule: AlphaSchedule::for_run(total_iters),
            checkpoint_every: total_iters.max(1),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters < 1 {
            return Err(Error::validation("train.total_iters must be >= 1"));
        }
        if self.batch_labeled < 1 || self.batch_unlabeled < 1 {
            return Err(Error::validation("train batch sizes must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("train.learning_rate must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::validation("train.weight_decay must be >= 0"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::validation("train.beta must be >= 0"));
        }
        if self.checkpoint_every < 1 {
            return Err(Error::validation("train.checkpoint_every must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.pseudo_threshold) {
            return Err(Error::validation("train.pseudo_threshold must be in [0, 1]"));
        }
        if self.mcc_role == Role::Eval {
            return Err(Error::validation("train.mcc_role must be labeled_target or unlabeled_source"));
        }
        self.alpha_schedule.validate()?;
        self.mcc.validate(2)
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let p = (iteration as f64 / self.total_iters as f64).min(1.0);
                self.learning_rate * 0.5 * (1.0 + (PI * p).cos())
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "iter,ce_labeled,ce_pseudo,mcc,alpha,total,lr";

/// The log as CSV. Values use the shortest representation that parses
/// back to the same `f64`.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let l = &r.loss;
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iter, l.ce_labeled, l.ce_pseudo, l.mcc, l.alpha, l.total, r.lr
        ));
    }
    s
}

/// Positions of the four sampling streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerRngs {
    pub labeled: RngState,
    pub unlabeled: RngState,
    pub augment_labeled: RngState,
    pub augment_unlabeled: RngState,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iteration: u64,
    pub model: ModelConfig,
    pub normalization: Normalization,
    pub params: ModelParams,
    pub optimizer: AdamW,
    pub rng: SamplerRngs,
    pub log: Vec<LogRow>,
}

impl TrainState {
    pub fn model_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            model: self.model.clone(),
            normalization: self.normalization,
            params: self.params.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    kind: String,
    model: ModelConfig,
    normalization: Normalization,
    iteration: u64,
    adam: AdamMeta,
    rng: SamplerRngs,
    log: Vec<LogRow>,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
}

const STATE_KIND: &str = "train_state";

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let o = &state.optimizer;
    let meta = StateMeta {
        kind: STATE_KIND.into(),
        model: state.model.clone(),
        normalization: state.normalization,
        iteration: state.iteration,
        adam: AdamMeta {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            step: o.step,
        },
        rng: state.rng,
        log: state.log.clone(),
    };
    let moments = o.named_arrays();
    let arrays: Vec<&ParamTensor> = state.params.tensors().iter().chain(moments.iter()).collect();
    write_archive(path, &serde_json::to_value(&meta)?, &arrays)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let (meta, arrays) = read_archive(path)?;
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let meta: StateMeta =
        serde_json::from_value(meta).map_err(|e| corrupt(format!("not a training state: {e}")))?;
    if meta.kind != STATE_KIND {
        return Err(corrupt(format!("archive holds `{}`, not a training state", meta.kind)));
    }
    let (template, _) = build(&meta.model)?;
    let mut by_name: HashMap<String, ParamTensor> = arrays.into_iter().map(|a| (a.name.clone(), a)).collect();
    let mut take = |prefix: &str| -> Result<ModelParams> {
        let mut out = Vec::with_capacity(template.len());
        for t in template.tensors() {
            let name = format!("{prefix}{}", t.name);
            let a = by_name
                .remove(&name)
                .ok_or_else(|| corrupt(format!("missing array `{name}`")))?;
            if a.shape != t.shape {
                return Err(corrupt(format!("array `{name}` has shape {:?}", a.shape)));
            }
            out.push(ParamTensor { name: t.name.clone(), ..a });
        }
        Ok(ModelParams::new(out))
    };
    let params = take("")?;
    let m = take("adam.m.")?;
    let v = take("adam.v.")?;
    Ok(TrainState {
        iteration: meta.iteration,
        model: meta.model,
        normalization: meta.normalization,
        params,
        optimizer: AdamW {
            beta1: meta.adam.beta1,
            beta2: meta.adam.beta2,
            eps: meta.adam.eps,
            weight_decay: meta.adam.weight_decay,
            step: meta.adam.step,
            m,
            v,
        },
        rng: meta.rng,
        log: meta.log,
    })
}

/// A configured run that can be stepped, saved and resumed.
pub struct TrainSession {
    cfg: TrainConfig,
    augment: AugmentConfig,
    loss: LossConfig,
    net: Box<dyn SegmentationNet>,
    labeled: Vec<TileSample>,
    /// Unlabeled tiles with their pseudo masks (all `255` when the pseudo
    /// term is off). `None` for supervised runs.
    unlabeled: Option<Vec<TileSample>>,
    state: TrainState,
    rngs: [ChaCha8Rng; 4],
    aug_seed: u64,
}

impl TrainSession {
    /// Supervised training on `labeled`.
    pub fn supervised(
        cfg: TrainConfig,
        model: ModelConfig,
        augment: AugmentConfig,
        labeled: Vec<TileSample>,
    ) -> Result<Self> {
        let loss = LossConfig {
            alpha: AlphaSchedule {
                alpha_max: 0.0,
                ..cfg.alpha_schedule.clone()
            },
            beta: 0.0,
            mcc: cfg.mcc.clone(),
            mcc_input: MccInput::Unlabeled,
        };
        Self::new(cfg, model, augment, labeled, None, loss)
    }

    /// Adaptation training: labeled tiles plus unlabeled tiles with
    /// optional teacher pseudo-labels. The unlabeled tiles' own masks are
    /// never used.
    pub fn ssda(
        cfg: TrainConfig,
        model: ModelConfig,
        augment: AugmentConfig,
        labeled: Vec<TileSample>,
        unlabeled: Vec<TileSample>,
        pseudo: Option<&[PseudoLabelMap]>,
    ) -> Result<Self> {
        if unlabeled.is_empty() {
            return Err(Error::validation("unlabeled set is empty"));
        }
        let loss = LossConfig {
            alpha: cfg.alpha_schedule.clone(),
            beta: cfg.beta,
            mcc: cfg.mcc.clone(),
            mcc_input: match cfg.mcc_role {
                Role::LabeledTarget => MccInput::Labeled,
                _ => MccInput::Unlabeled,
            },
        };
        let unlabeled = if loss.pseudo_enabled() {
            let pseudo = pseudo.ok_or_else(|| {
                Error::Config(format!("beta = {} needs a pseudo-label store", cfg.beta))
            })?;
            attach_pseudo_masks(unlabeled, pseudo)?
        } else {
            unlabeled
                .into_iter()
                .map(|t| {
                    let (w, h) = t.image.dimensions();
                    TileSample { mask: GrayImage::from_pixel(w, h, Luma([IGNORE])), ..t }
                })
                .collect()
        };
        Self::new(cfg, model, augment, labeled, Some(unlabeled), loss)
    }

    fn new(
        cfg: TrainConfig,
        model: ModelConfig,
        augment: AugmentConfig,
        labeled: Vec<TileSample>,
        unlabeled: Option<Vec<TileSample>>,
        loss: LossConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        augment.validate()?;
        if labeled.is_empty() {
            return Err(Error::validation("labeled train split is empty"));
        }
        let (params, net) = build(&model)?;
        let m = model.size_multiple() as u32;
        if augment.crop_size % m != 0 {
            return Err(Error::validation(format!(
                "augment.crop_size {} is not divisible by {m}",
                augment.crop_size
            )));
        }
        let normalization = Normalization::from_images(labeled.iter().map(|t| &t.image));
        let aug_seed = cfg.seed ^ augment.seed;
        let rngs = [
            rng::stream(cfg.seed, rng::STREAM_LABELED),
            rng::stream(cfg.seed, rng::STREAM_UNLABELED),
            rng::stream(aug_seed, rng::STREAM_AUG_LABELED),
            rng::stream(aug_seed, rng::STREAM_AUG_UNLABELED),
        ];
        Ok(TrainSession {
            state: TrainState {
                iteration: 0,
                model,
                normalization,
                optimizer: AdamW::new(&params, cfg.weight_decay),
                params,
                rng: capture(&rngs, cfg.seed, aug_seed),
                log: Vec::new(),
            },
            cfg,
            augment,
            loss,
            net,
            labeled,
            unlabeled,
            rngs,
            aug_seed,
        })
    }

    fn capture_rngs(&self) -> SamplerRngs {
        capture(&self.rngs, self.cfg.seed, self.aug_seed)
    }

    /// Continues from a saved state of a run with the same configuration.
    pub fn resume(&mut self, state: TrainState) -> Result<()> {
        if state.model != self.state.model || !state.params.same_layout(&self.state.params) {
            return Err(Error::Config("checkpoint does not match the configured model".into()));
        }
        if state.iteration > self.cfg.total_iters {
            return Err(Error::Config(format!(
                "checkpoint is at iteration {}, past total_iters {}",
                state.iteration, self.cfg.total_iters
            )));
        }
        self.rngs = [
            state.rng.labeled.restore(),
            state.rng.unlabeled.restore(),
            state.rng.augment_labeled.restore(),
            state.rng.augment_unlabeled.restore(),
        ];
        self.state = state;
        Ok(())
    }

    /// Replaces the input normalization; only allowed before the first step.
    pub fn set_normalization(&mut self, n: Normalization) -> Result<()> {
        if self.state.iteration > 0 {
            return Err(Error::Config("normalization can only change before training starts".into()));
        }
        self.state.normalization = n;
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.cfg.total_iters
    }

    pub fn log(&self) -> &[LogRow] {
        &self.state.log
    }

    pub fn params(&self) -> &ModelParams {
        &self.state.params
    }

    /// Snapshot of the complete training state.
    pub fn state(&self) -> TrainState {
        TrainState {
            rng: self.capture_rngs(),
            ..self.state.clone()
        }
    }

    pub fn model_checkpoint(&self) -> ModelCheckpoint {
        self.state.model_checkpoint()
    }

    fn draw_batch(
        &mut self,
        which: usize,
        n: usize,
    ) -> Result<(crate::model::Tensor4, Vec<u8>)> {
        let tiles = if which == 0 {
            &self.labeled
        } else {
            self.unlabeled.as_ref().expect("unlabeled stream in a supervised run")
        };
        let mut picked = Vec::with_capacity(n);
        for _ in 0..n {
            let i = self.rngs[which].random_range(0..tiles.len());
            picked.push(augment(&tiles[i], &self.augment, &mut self.rngs[which + 2]));
        }
        let images: Vec<&image::RgbImage> = picked.iter().map(|t| &t.image).collect();
        let tensor = self.state.normalization.to_tensor(&images)?;
        let masks = picked.iter().flat_map(|t| t.mask.iter().copied()).collect();
        Ok((tensor, masks))
    }

    /// Seed of the MCC pixel subsample at `iteration`; a pure function of
    /// the run seed so resumed runs draw the same pixels.
    fn mcc_seed(&self, iteration: u64) -> u64 {
        let mut r = rng::stream(self.cfg.seed, rng::STREAM_MCC);
        r.set_word_pos(iteration as u128 * 2);
        r.random()
    }

    /// One optimizer update. Returns the loss evaluated before the update.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        if self.is_done() {
            return Err(Error::validation(format!(
                "run already finished {} iterations",
                self.cfg.total_iters
            )));
        }
        let t = self.state.iteration;
        let (images, masks) = self.draw_batch(0, self.cfg.batch_labeled)?;
        let labeled = LabeledBatch { images, masks };
        let unlabeled = if self.unlabeled.is_some() {
            let (images, masks) = self.draw_batch(1, self.cfg.batch_unlabeled)?;
            Some(UnlabeledBatch {
                images,
                pseudo_masks: self.loss.pseudo_enabled().then_some(masks),
            })
        } else {
            None
        };
        let mut grads = self.state.params.zeros_like();
        let loss = combined_loss_with_grad(
            self.net.as_ref(),
            &self.state.params,
            &labeled,
            unlabeled.as_ref(),
            t,
            &self.loss,
            self.mcc_seed(t),
            &mut grads,
        )?;
        if !loss.is_finite() {
            return Err(Error::Numerical { layer: "loss".into() });
        }
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::Numerical {
                layer: format!("gradient of {name}"),
            });
        }
        let lr = self.cfg.lr_at(t);
        self.state.optimizer.update(&mut self.state.params, &grads, lr);
        self.state.log.push(LogRow { iter: t, loss, lr });
        self.state.iteration += 1;
        Ok(loss)
    }

    /// Steps until `iteration` (capped at `total_iters`).
    pub fn run_until(&mut self, iteration: u64) -> Result<()> {
        while self.state.iteration < iteration.min(self.cfg.total_iters) {
            self.step()?;
        }
        Ok(())
    }

    /// Runs to completion, saving `state_{iter:08}.ckpt` into
    /// `checkpoint_dir` every `checkpoint_every` iterations.
    pub fn run(&mut self, checkpoint_dir: Option<&Path>) -> Result<()> {
        let every = (self.cfg.total_iters / 20).max(1);
        while !self.is_done() {
            let loss = self.step()?;
            if self.state.iteration % every == 0 {
                log::info!(
                    "iter {}/{}: total {:.4} ce {:.4} mcc {:.4}",
                    self.state.iteration,
                    self.cfg.total_iters,
                    loss.total,
                    loss.ce_labeled,
                    loss.mcc
                );
            }
            if self.state.iteration % self.cfg.checkpoint_every == 0 {
                if let Some(dir) = checkpoint_dir {
                    let p = dir.join(format!("state_{:08}.ckpt", self.state.iteration));
                    save_checkpoint(&self.state(), &p)?;
                    log::info!("saved {}", p.display());
                }
            }
        }
        Ok(())
    }
}

fn capture(rngs: &[ChaCha8Rng; 4], seed: u64, aug_seed: u64) -> SamplerRngs {
    SamplerRngs {
        labeled: RngState::capture(seed, &rngs[0]),
        unlabeled: RngState::capture(seed, &rngs[1]),
        augment_labeled: RngState::capture(aug_seed, &rngs[2]),
        augment_unlabeled: RngState::capture(aug_seed, &rngs[3]),
    }
}

fn attach_pseudo_masks(unlabeled: Vec<TileSample>, pseudo: &[PseudoLabelMap]) -> Result<Vec<TileSample>> {
    let by_origin: HashMap<&TileOrigin, &PseudoLabelMap> = pseudo.iter().map(|m| (&m.origin, m)).collect();
    unlabeled
        .into_iter()
        .map(|t| {
            let m = by_origin.get(&t.origin).ok_or_else(|| {
                Error::Config(format!(
                    "no pseudo-label for tile {}",
                    crate::datasets::tile_id(&t.origin)
                ))
            })?;
            if m.mask.dimensions() != t.image.dimensions() {
                return Err(Error::shape(format!(
                    "pseudo mask for {} does not match the tile size",
                    crate::datasets::tile_id(&t.origin)
                )));
            }
            Ok(TileSample { mask: m.mask.clone(), ..t })
        })
        .collect()
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub state: TrainState,
}

impl TrainOutcome {
    fn from_session(s: &TrainSession) -> Self {
        TrainOutcome {
            checkpoint: s.model_checkpoint(),
            state: s.state(),
        }
    }
}

/// Supervised baseline: `total_iters` steps of masked cross-entropy.
pub fn train_supervised(
    cfg: &TrainConfig,
    model: &ModelConfig,
    augment: &AugmentConfig,
    labeled: Vec<TileSample>,
) -> Result<TrainOutcome> {
    let mut s = TrainSession::supervised(cfg.clone(), model.clone(), augment.clone(), labeled)?;
    s.run(None)?;
    Ok(TrainOutcome::from_session(&s))
}

/// Adaptation run on the combined objective.
pub fn train_ssda(
    cfg: &TrainConfig,
    model: &ModelConfig,
    augment: &AugmentConfig,
    labeled: Vec<TileSample>,
    unlabeled: Vec<TileSample>,
    pseudo: Option<&[PseudoLabelMap]>,
) -> Result<TrainOutcome> {
    let mut s = TrainSession::ssda(cfg.clone(), model.clone(), augment.clone(), labeled, unlabeled, pseudo)?;
    s.run(None)?;
    Ok(TrainOutcome::from_session(&s))
}

/// True when every logged α equals the schedule at its iteration.
pub fn alpha_column_matches(rows: &[LogRow], schedule: &AlphaSchedule) -> bool {
    rows.iter().all(|r| r.loss.alpha == alpha_at(schedule, r.iter))
}

#[cfg(test)]
mod tests;
