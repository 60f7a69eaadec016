//! Segmentation-network contract: image batch in, per-pixel class logits
//! out.
//!
//! Architectures are selected through [`Arch`]. Only [`Arch::Toynet`] is
//! built here; the UNet++ and HRNet entries are registry slots that report
//! [`Error::Unsupported`] until an implementation is plugged in.

pub mod archive;
mod layers;
mod params;
mod tensor;
mod toynet;

use std::any::Any;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use params::{ModelParams, ParamTensor};
pub use tensor::Tensor4;
pub use toynet::ToyNet;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Toynet,
    Unetpp,
    Hrnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n_classes: usize,
    /// Channel count of the first stage.
    pub width: usize,
    /// Number of down/up-sampling stages.
    pub depth: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Toynet,
            n_classes: 2,
            width: 8,
            depth: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::validation("model.n_classes must be at least 2"));
        }
        if self.width < 4 {
            return Err(Error::validation("model.width must be at least 4"));
        }
        if self.depth < 1 {
            return Err(Error::validation("model.depth must be at least 1"));
        }
        Ok(())
    }

    /// Spatial dimensions must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

/// Per-channel affine normalization applied to 8-bit RGB before the
/// network sees it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [127.5; 3],
            std: [64.0; 3],
        }
    }
}

impl Normalization {
    /// Channel statistics over every pixel of `images`.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut n = 0u64;
        for img in images {
            for p in img.pixels() {
                for c in 0..3 {
                    let v = p.0[c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Normalization::default();
        }
        let mut out = Normalization::default();
        for c in 0..3 {
            let mean = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - mean * mean).max(0.0);
            out.mean[c] = mean as f32;
            out.std[c] = var.sqrt().max(1.0) as f32;
        }
        out
    }

    /// Packs equally sized images into a normalized NCHW batch.
    pub fn to_tensor(&self, images: &[&RgbImage]) -> Result<Tensor4> {
        let first = images
            .first()
            .ok_or_else(|| Error::shape("empty image batch"))?;
        let (w, h) = first.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut t = Tensor4::zeros([images.len(), 3, h, w]);
        let hw = h * w;
        for (b, img) in images.iter().enumerate() {
            if img.dimensions() != first.dimensions() {
                return Err(Error::shape("images in a batch must share dimensions"));
            }
            let dst = t.image_mut(b);
            for (i, p) in img.pixels().enumerate() {
                for c in 0..3 {
                    dst[c * hw + i] = (p.0[c] as f32 - self.mean[c]) / self.std[c];
                }
            }
        }
        Ok(t)
    }
}

/// Per-pixel class scores, batch×classes×H×W, in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    shape: [usize; 4],
    values: Vec<f64>,
}

impl LogitMap {
    pub fn new(shape: [usize; 4], values: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::shape(format!(
                "logit map of shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                values.len()
            )));
        }
        Ok(LogitMap { shape, values })
    }

    pub fn from_tensor(t: &Tensor4) -> Self {
        LogitMap {
            shape: t.shape(),
            values: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn classes(&self) -> usize {
        self.shape[1]
    }

    /// Pixels per image (H·W).
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub(crate) fn index(&self, b: usize, c: usize, p: usize) -> usize {
        (b * self.shape[1] + c) * self.plane() + p
    }

    /// Scores of one pixel across classes.
    pub fn pixel(&self, b: usize, p: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.classes()).map(move |c| self.values[self.index(b, c, p)])
    }
}

/// Numerically stable softmax of `x / temperature`, written into `out`.
pub fn softmax_into(x: &[f64], temperature: f64, out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = ((v - m) / temperature).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Softmax over the class axis; same shape as the logits.
pub fn softmax_map(logits: &LogitMap) -> LogitMap {
    let (nb, nc, np) = (logits.batch(), logits.classes(), logits.plane());
    let mut out = logits.clone();
    let mut row = vec![0.0; nc];
    let mut prob = vec![0.0; nc];
    for b in 0..nb {
        for p in 0..np {
            for (c, r) in row.iter_mut().enumerate() {
                *r = logits.values[logits.index(b, c, p)];
            }
            softmax_into(&row, 1.0, &mut prob);
            for (c, &v) in prob.iter().enumerate() {
                let i = out.index(b, c, p);
                out.values[i] = v;
            }
        }
    }
    out
}

/// Opaque saved activations from a training-mode forward pass.
pub struct ForwardTape(pub(crate) Box<dyn Any + Send>);

/// A trainable segmentation network.
pub trait SegmentationNet: Send + Sync {
    fn config(&self) -> &ModelConfig;

    /// Inference-mode forward pass.
    fn forward(&self, params: &ModelParams, images: &Tensor4) -> Result<LogitMap>;

    /// Forward pass that keeps what [`SegmentationNet::backward`] needs.
    fn forward_train(&self, params: &ModelParams, images: &Tensor4) -> Result<(LogitMap, ForwardTape)>;

    /// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(logits).
    fn backward(
        &self,
        params: &ModelParams,
        tape: &ForwardTape,
        grad_logits: &[f64],
        grads: &mut ModelParams,
    ) -> Result<()>;

    /// Rejects inputs whose layout the network cannot process.
    fn check_input(&self, images: &Tensor4) -> Result<()> {
        let [_, c, h, w] = images.shape();
        let m = self.config().size_multiple();
        if c != 3 {
            return Err(Error::shape(format!("expected 3 input channels, got {c}")));
        }
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} is not divisible by 2^depth = {m}"
            )));
        }
        Ok(())
    }
}

/// Instantiates the configured architecture with seeded initial weights.
pub fn build(cfg: &ModelConfig) -> Result<(ModelParams, Box<dyn SegmentationNet>)> {
    cfg.validate()?;
    match cfg.arch {
        Arch::Toynet => {
            let net = ToyNet::new(cfg.clone());
            Ok((net.init_params(), Box::new(net)))
        }
        Arch::Unetpp | Arch::Hrnet => Err(Error::Unsupported(format!(
            "architecture {:?} is a registry slot without a built-in implementation",
            cfg.arch
        ))),
    }
}

/// Class probabilities for a normalized image batch.
pub fn predict_probs(net: &dyn SegmentationNet, params: &ModelParams, images: &Tensor4) -> Result<LogitMap> {
    let logits = net.forward(params, images)?;
    Ok(softmax_map(&logits))
}

/// Hard labels (argmax, lowest class index on ties) for each pixel.
pub fn argmax_labels(probs: &LogitMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(probs.batch() * probs.plane());
    for b in 0..probs.batch() {
        for p in 0..probs.plane() {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (c, v) in probs.pixel(b, p).enumerate() {
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Class probabilities (`1×C×H×W`) for one image of any size. The
/// image is reflect-padded on the bottom and right to the network's size
/// multiple and the prediction is cropped back.
pub fn predict_image(
    net: &dyn SegmentationNet,
    params: &ModelParams,
    normalization: &Normalization,
    image: &RgbImage,
) -> Result<LogitMap> {
    let m = net.config().size_multiple() as u32;
    let (w, h) = image.dimensions();
    let (pw, ph) = (w.div_ceil(m) * m, h.div_ceil(m) * m);
    let padded;
    let input = if (pw, ph) == (w, h) {
        image
    } else {
        padded = RgbImage::from_fn(pw, ph, |x, y| {
            *image.get_pixel(crate::augment::reflect(x as i64, w), crate::augment::reflect(y as i64, h))
        });
        &padded
    };
    let probs = predict_probs(net, params, &normalization.to_tensor(&[input])?)?;
    if (pw, ph) == (w, h) {
        return Ok(probs);
    }
    let nc = probs.classes();
    let mut out = Vec::with_capacity(nc * (w * h) as usize);
    for c in 0..nc {
        for y in 0..h as usize {
            let row = probs.index(0, c, y * pw as usize);
            out.extend_from_slice(&probs.values[row..row + w as usize]);
        }
    }
    LogitMap::new([1, nc, h as usize, w as usize], out)
}

/// A model snapshot: architecture, input normalization and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: ModelConfig,
    pub normalization: Normalization,
    pub params: ModelParams,
}

impl ModelCheckpoint {
    pub fn id(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.model).unwrap_or_default());
        for t in self.params.tensors() {
            h.update(t.name.as_bytes());
            for v in &t.values {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "model",
            "model": self.model,
            "normalization": self.normalization,
        });
        let arrays: Vec<&ParamTensor> = self.params.tensors().iter().collect();
        archive::write_archive(path, &meta, &arrays)
    }

    /// Loads the model part of any checkpoint archive (model-only or full
    /// training state).
    pub fn load(path: &Path) -> Result<Self> {
        let (meta, arrays) = archive::read_archive(path)?;
        let model: ModelConfig = serde_json::from_value(meta["model"].clone())?;
        let normalization: Normalization = serde_json::from_value(meta["normalization"].clone())?;
        let (template, _) = build(&model)?;
        let mut by_name: std::collections::HashMap<String, ParamTensor> =
            arrays.into_iter().map(|a| (a.name.clone(), a)).collect();
        let mut tensors = Vec::with_capacity(template.len());
        for t in template.tensors() {
            let a = by_name.remove(&t.name).ok_or_else(|| Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("missing parameter `{}`", t.name),
            })?;
            if a.shape != t.shape {
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    reason: format!("parameter `{}` has shape {:?}, expected {:?}", t.name, a.shape, t.shape),
                });
            }
            tensors.push(a);
        }
        Ok(ModelCheckpoint {
            model,
            normalization,
            params: ModelParams::new(tensors),
        })
    }
}

#[cfg(test)]
mod tests;
