use serde::{Deserialize, Serialize};

use crate::model::{ModelParams, ParamTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adamw,
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamW {
    pub fn new(params: &ModelParams, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads.values(i);
            let m = self.m.values_mut(i);
            let v = self.v.values_mut(i);
            let p = params.values_mut(i);
            for j in 0..p.len() {
                let gj = g[j] as f64;
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let mut pj = p[j] as f64;
                pj -= lr * self.weight_decay * pj;
                pj -= lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                p[j] = pj as f32;
            }
        }
    }

    /// Moment arrays named `adam.m.<param>` and `adam.v.<param>`.
    pub fn named_arrays(&self) -> Vec<ParamTensor> {
        let rename = |prefix: &str, src: &ModelParams| -> Vec<ParamTensor> {
            src.tensors()
                .iter()
                .map(|t| ParamTensor {
                    name: format!("{prefix}{}", t.name),
                    ..t.clone()
                })
                .collect()
        };
        let mut out = rename("adam.m.", &self.m);
        out.extend(rename("adam.v.", &self.v));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> ModelParams {
        ModelParams::new(vec![ParamTensor {
            name: "w".into(),
            shape: vec![1],
            values: vec![v],
        }])
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr·sign(g)
        let mut p = one(1.0);
        let mut opt = AdamW::new(&p, 0.0);
        opt.update(&mut p, &one(0.3), 0.01);
        assert!((p.values(0)[0] - 0.99).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = one(2.0);
        let mut opt = AdamW::new(&p, 0.5);
        opt.update(&mut p, &one(0.0), 0.1);
        // zero gradient: only the decay term acts
        assert!((p.values(0)[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_never_moves() {
        let mut p = one(0.7);
        let mut opt = AdamW::new(&p, 0.01);
        for k in 0..50 {
            opt.update(&mut p, &one(k as f32 - 20.0), 0.0);
        }
        assert_eq!(p.values(0)[0], 0.7);
        assert_eq!(opt.step, 50);
    }
}
