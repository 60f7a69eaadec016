//! Small UNet-shaped encoder-decoder.
//!
//! Each encoder stage is two 3×3 conv+ReLU layers followed by 2×2 max
//! pooling; the bottleneck is one 3×3 conv+ReLU; each decoder stage
//! upsamples, concatenates the matching encoder activation (skip
//! connection) and applies one 3×3 conv+ReLU; a 1×1 conv produces logits.
//! Stage `k` carries `width · 2^k` channels.

use std::any::Any;

use rand::Rng;

use super::layers::{self, Conv, ConvCache};
use super::params::{ModelParams, ParamTensor};
use super::tensor::Tensor4;
use super::{ForwardTape, LogitMap, ModelConfig, SegmentationNet};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ToyNet {
    cfg: ModelConfig,
    convs: Vec<(String, Conv)>,
}

struct EncoderCache {
    conv_a: ConvCache,
    act_a: Tensor4,
    conv_b: ConvCache,
    skip: Tensor4,
    pool_arg: Vec<u32>,
}

struct DecoderCache {
    conv: ConvCache,
    act: Tensor4,
    up_channels: usize,
}

struct Tape {
    encoders: Vec<EncoderCache>,
    bottleneck: ConvCache,
    bottleneck_act: Tensor4,
    /// Indexed by stage, not by execution order.
    decoders: Vec<DecoderCache>,
    head: ConvCache,
}

impl ToyNet {
    pub fn new(cfg: ModelConfig) -> Self {
        let d = cfg.depth;
        let ch = |k: usize| cfg.width << k;
        let mut convs = Vec::new();
        for k in 0..d {
            let cin = if k == 0 { 3 } else { ch(k - 1) };
            convs.push((format!("enc{k}.conv_a"), Conv { cin, cout: ch(k), ksize: 3 }));
            convs.push((format!("enc{k}.conv_b"), Conv { cin: ch(k), cout: ch(k), ksize: 3 }));
        }
        convs.push((
            "bottleneck".to_string(),
            Conv { cin: ch(d - 1), cout: ch(d), ksize: 3 },
        ));
        for k in (0..d).rev() {
            convs.push((
                format!("dec{k}"),
                Conv { cin: ch(k + 1) + ch(k), cout: ch(k), ksize: 3 },
            ));
        }
        convs.push((
            "head".to_string(),
            Conv { cin: ch(0), cout: cfg.n_classes, ksize: 1 },
        ));
        ToyNet { cfg, convs }
    }

    /// Kaiming-uniform weights, zero biases.
    pub fn init_params(&self) -> ModelParams {
        let mut rng = rng::stream(self.cfg.seed, rng::STREAM_INIT);
        let mut tensors = Vec::with_capacity(2 * self.convs.len());
        for (name, conv) in &self.convs {
            let fan_in = (conv.cin * conv.ksize * conv.ksize) as f32;
            let bound = (6.0 / fan_in).sqrt();
            let mut w = ParamTensor::zeros(
                format!("{name}.weight"),
                vec![conv.cout, conv.cin, conv.ksize, conv.ksize],
            );
            for v in &mut w.values {
                *v = rng.random_range(-bound..bound);
            }
            tensors.push(w);
            tensors.push(ParamTensor::zeros(format!("{name}.bias"), vec![conv.cout]));
        }
        ModelParams::new(tensors)
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        let ok = params.len() == 2 * self.convs.len()
            && self.convs.iter().enumerate().all(|(i, (_, c))| {
                params.values(2 * i).len() == c.weight_len() && params.values(2 * i + 1).len() == c.cout
            });
        if ok {
            Ok(())
        } else {
            Err(Error::shape("parameters do not match the toynet layout"))
        }
    }

    fn conv(&self, idx: usize, params: &ModelParams, x: &Tensor4, relu: bool) -> Result<(Tensor4, ConvCache)> {
        let (name, conv) = &self.convs[idx];
        let (mut y, cache) = conv.forward(x, params.values(2 * idx), params.values(2 * idx + 1));
        if relu {
            layers::relu_inplace(&mut y);
        }
        if !y.all_finite() {
            return Err(Error::Numerical { layer: name.clone() });
        }
        Ok((y, cache))
    }

    fn conv_backward(
        &self,
        idx: usize,
        params: &ModelParams,
        cache: &ConvCache,
        dy: &Tensor4,
        grads: &mut ModelParams,
        need_dx: bool,
    ) -> Option<Tensor4> {
        let conv = &self.convs[idx].1;
        let (w_part, b_part) = grads.tensors_mut().split_at_mut(2 * idx + 1);
        conv.backward(
            cache,
            params.values(2 * idx),
            dy,
            &mut w_part[2 * idx].values,
            &mut b_part[0].values,
            need_dx,
        )
    }

    fn run(&self, params: &ModelParams, images: &Tensor4) -> Result<(LogitMap, Tape)> {
        self.check_params(params)?;
        self.check_input(images)?;
        let d = self.cfg.depth;
        let mut encoders = Vec::with_capacity(d);
        let mut x = images.clone();
        for k in 0..d {
            let (act_a, conv_a) = self.conv(2 * k, params, &x, true)?;
            let (skip, conv_b) = self.conv(2 * k + 1, params, &act_a, true)?;
            let (pooled, pool_arg) = layers::maxpool2(&skip);
            x = pooled;
            encoders.push(EncoderCache { conv_a, act_a, conv_b, skip, pool_arg });
        }
        let (bottleneck_act, bottleneck) = self.conv(2 * d, params, &x, true)?;
        let mut u = bottleneck_act.clone();
        let mut decoders: Vec<Option<DecoderCache>> = (0..d).map(|_| None).collect();
        for (step, k) in (0..d).rev().enumerate() {
            let up = layers::upsample2(&u);
            let up_channels = up.channels();
            let cat = layers::concat(&up, &encoders[k].skip);
            let (act, conv) = self.conv(2 * d + 1 + step, params, &cat, true)?;
            u = act.clone();
            decoders[k] = Some(DecoderCache { conv, act, up_channels });
        }
        let (logits, head) = self.conv(3 * d + 1, params, &u, false)?;
        let tape = Tape {
            encoders,
            bottleneck,
            bottleneck_act,
            decoders: decoders.into_iter().map(Option::unwrap).collect(),
            head,
        };
        Ok((LogitMap::from_tensor(&logits), tape))
    }
}

impl SegmentationNet for ToyNet {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn forward(&self, params: &ModelParams, images: &Tensor4) -> Result<LogitMap> {
        self.run(params, images).map(|(logits, _)| logits)
    }

    fn forward_train(&self, params: &ModelParams, images: &Tensor4) -> Result<(LogitMap, ForwardTape)> {
        let (logits, tape) = self.run(params, images)?;
        Ok((logits, ForwardTape(Box::new(tape))))
    }

    fn backward(
        &self,
        params: &ModelParams,
        tape: &ForwardTape,
        grad_logits: &[f64],
        grads: &mut ModelParams,
    ) -> Result<()> {
        let tape: &Tape = (tape.0.as_ref() as &dyn Any)
            .downcast_ref()
            .ok_or_else(|| Error::shape("forward tape was not produced by toynet"))?;
        if !params.same_layout(grads) {
            return Err(Error::shape("gradient buffer layout differs from parameters"));
        }
        let d = self.cfg.depth;
        let top = &tape.decoders[0].act;
        let [b, _, h, w] = top.shape();
        let dlogits = Tensor4::from_vec(
            [b, self.cfg.n_classes, h, w],
            grad_logits.iter().map(|&g| g as f32).collect(),
        )?;
        let mut g = self
            .conv_backward(3 * d + 1, params, &tape.head, &dlogits, grads, true)
            .unwrap();
        let mut skip_grads: Vec<Option<Tensor4>> = (0..d).map(|_| None).collect();
        for k in 0..d {
            let dc = &tape.decoders[k];
            layers::relu_backward(&dc.act, &mut g);
            let step = d - 1 - k;
            let gcat = self
                .conv_backward(2 * d + 1 + step, params, &dc.conv, &g, grads, true)
                .unwrap();
            let (gup, gskip) = layers::concat_backward(&gcat, dc.up_channels);
            skip_grads[k] = Some(gskip);
            g = layers::upsample2_backward(&gup);
        }
        layers::relu_backward(&tape.bottleneck_act, &mut g);
        g = self
            .conv_backward(2 * d, params, &tape.bottleneck, &g, grads, true)
            .unwrap();
        for k in (0..d).rev() {
            let enc = &tape.encoders[k];
            let mut gs = layers::maxpool2_backward(enc.skip.shape(), &enc.pool_arg, &g);
            for (a, s) in gs.data_mut().iter_mut().zip(skip_grads[k].take().unwrap().data()) {
                *a += s;
            }
            layers::relu_backward(&enc.skip, &mut gs);
            let mut ga = self
                .conv_backward(2 * k + 1, params, &enc.conv_b, &gs, grads, true)
                .unwrap();
            layers::relu_backward(&enc.act_a, &mut ga);
            if let Some(gx) = self.conv_backward(2 * k, params, &enc.conv_a, &ga, grads, k > 0) {
                g = gx;
            }
        }
        Ok(())
    }
}
