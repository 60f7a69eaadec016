//! Minimum Class Confusion on dense predictions.
//!
//! Every pixel is one example. With `Ŷ` the N×C matrix of
//! temperature-scaled softmax outputs and `W` the diagonal of
//! certainty weights `N·(1 + e^{-H(ŷ_i)}) / Σ_k (1 + e^{-H(ŷ_k)})`, the
//! class correlation `M = Ŷᵀ W Ŷ` is row-normalized and the loss is its
//! off-diagonal mass divided by the class count.
//!
//! All reductions over pixels go through [`order_free_sum`], so the value
//! is bitwise invariant to any permutation of the pixels.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::model::LogitMap;
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MccConfig {
    pub temperature: f64,
    pub entropy_weighting: bool,
    /// Upper bound on pixels per evaluation; larger batches are
    /// subsampled uniformly without replacement.
    pub pixel_subsample: Option<usize>,
}

impl Default for MccConfig {
    fn default() -> Self {
        MccConfig {
            temperature: 2.5,
            entropy_weighting: true,
            pixel_subsample: Some(4096),
        }
    }
}

impl MccConfig {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::validation("mcc.temperature must be positive"));
        }
        if let Some(k) = self.pixel_subsample {
            if k < n_classes {
                return Err(Error::validation(format!(
                    "mcc.pixel_subsample ({k}) must be at least the class count ({n_classes})"
                )));
            }
        }
        Ok(())
    }
}

/// Sum that depends only on the multiset of inputs: values are sorted
/// before a sequential reduction.
pub fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Loss value only. `subsample_seed` selects the pixel subset when the
/// batch exceeds `cfg.pixel_subsample`.
pub fn mcc_loss(logits: &LogitMap, cfg: &MccConfig, subsample_seed: u64) -> Result<f64> {
    mcc_impl(logits, cfg, subsample_seed, None)
}

/// Loss value and its exact gradient with respect to the logits
/// (including the path through the certainty weights).
pub fn mcc_loss_with_grad(logits: &LogitMap, cfg: &MccConfig, subsample_seed: u64) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; logits.values().len()];
    let v = mcc_impl(logits, cfg, subsample_seed, Some(&mut grad))?;
    Ok((v, grad))
}

fn select_pixels(total: usize, cfg: &MccConfig, seed: u64) -> Vec<usize> {
    match cfg.pixel_subsample {
        Some(k) if total > k => {
            let mut r = rng::stream(seed, rng::STREAM_MCC);
            let mut idx = index::sample(&mut r, total, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..total).collect(),
    }
}

pub(crate) fn mcc_impl(
    logits: &LogitMap,
    cfg: &MccConfig,
    subsample_seed: u64,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let nc = logits.classes();
    cfg.validate(nc)?;
    if logits.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            layer: "mcc input logits".into(),
        });
    }
    let np = logits.plane();
    let pixels = select_pixels(logits.batch() * np, cfg, subsample_seed);
    let n = pixels.len();
    if n < nc {
        return Err(Error::validation(format!(
            "mcc needs at least {nc} pixels, got {n}"
        )));
    }
    let t = cfg.temperature;
    let x = logits.values();
    let at = |i: usize, c: usize| logits.index(pixels[i] / np, c, pixels[i] % np);

    // Per-pixel probabilities, log-probabilities and certainty weights.
    let mut y = vec![0.0; n * nc];
    let mut logy = vec![0.0; n * nc];
    let mut u = vec![1.0; n];
    let mut ent = vec![0.0; n];
    for i in 0..n {
        let row: Vec<f64> = (0..nc).map(|c| x[at(i, c)] / t).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let mut h = 0.0;
        for c in 0..nc {
            let ly = row[c] - lse;
            logy[i * nc + c] = ly;
            y[i * nc + c] = ly.exp();
            h -= y[i * nc + c] * ly;
        }
        ent[i] = h;
        if cfg.entropy_weighting {
            u[i] = 1.0 + (-h).exp();
        }
    }
    let s = order_free_sum(&mut u.clone());
    let scale = n as f64 / s;
    let w: Vec<f64> = u.iter().map(|&ui| scale * ui).collect();

    let mut corr = vec![0.0; nc * nc];
    let mut terms = vec![0.0; n];
    for j in 0..nc {
        for k in j..nc {
            for i in 0..n {
                terms[i] = w[i] * y[i * nc + j] * y[i * nc + k];
            }
            let v = order_free_sum(&mut terms);
            corr[j * nc + k] = v;
            corr[k * nc + j] = v;
        }
    }
    let row_sum: Vec<f64> = (0..nc).map(|j| corr[j * nc..(j + 1) * nc].iter().sum()).collect();
    let mut loss = 0.0;
    for j in 0..nc {
        for k in 0..nc {
            if k != j {
                loss += corr[j * nc + k] / row_sum[j];
            }
        }
    }
    loss /= nc as f64;

    let Some(grad) = grad else {
        return Ok(loss);
    };

    // d loss / d corr
    let inv_c = 1.0 / nc as f64;
    let mut g_corr = vec![0.0; nc * nc];
    for j in 0..nc {
        let off: f64 = (0..nc)
            .filter(|&k| k != j)
            .map(|k| corr[j * nc + k])
            .sum::<f64>();
        for k in 0..nc {
            let direct = if k != j { inv_c / row_sum[j] } else { 0.0 };
            g_corr[j * nc + k] = direct - inv_c * off / (row_sum[j] * row_sum[j]);
        }
    }
    // Symmetrized for the quadratic form y_i^T G y_i.
    let g_sym: Vec<f64> = (0..nc * nc)
        .map(|jk| {
            let (j, k) = (jk / nc, jk % nc);
            g_corr[j * nc + k] + g_corr[k * nc + j]
        })
        .collect();

    let mut g_w = vec![0.0; n];
    for i in 0..n {
        let yi = &y[i * nc..(i + 1) * nc];
        let mut acc = 0.0;
        for j in 0..nc {
            for k in 0..nc {
                acc += g_corr[j * nc + k] * yi[j] * yi[k];
            }
        }
        g_w[i] = acc;
    }
    let mut g_y = vec![0.0; n * nc];
    for i in 0..n {
        for j in 0..nc {
            let mut acc = 0.0;
            for k in 0..nc {
                acc += g_sym[j * nc + k] * y[i * nc + k];
            }
            g_y[i * nc + j] = w[i] * acc;
        }
    }
    if cfg.entropy_weighting {
        // w_i = N u_i / S  =>  dL/du_i = (N/S) (g_w_i - Σ_l g_w_l u_l / S)
        let mut wu: Vec<f64> = g_w.iter().zip(&u).map(|(g, ui)| g * ui).collect();
        let mean_term = order_free_sum(&mut wu) / s;
        for i in 0..n {
            let g_u = scale * (g_w[i] - mean_term);
            let g_h = -(-ent[i]).exp() * g_u;
            for j in 0..nc {
                g_y[i * nc + j] += g_h * -(logy[i * nc + j] + 1.0);
            }
        }
    }
    for i in 0..n {
        let yi = &y[i * nc..(i + 1) * nc];
        let gi = &g_y[i * nc..(i + 1) * nc];
        let dot: f64 = yi.iter().zip(gi).map(|(a, b)| a * b).sum();
        for c in 0..nc {
            grad[at(i, c)] = yi[c] * (gi[c] - dot) / t;
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(t: f64) -> MccConfig {
        MccConfig {
            temperature: t,
            entropy_weighting: true,
            pixel_subsample: None,
        }
    }

    /// Straight-line transcription of the definition: explicit N×C
    /// matrices, a dense diagonal weight matrix and a plain matrix product.
    fn reference(logits: &LogitMap, cfg: &MccConfig) -> f64 {
        let (nb, nc, np) = (logits.batch(), logits.classes(), logits.plane());
        let n = nb * np;
        let mut yhat = vec![vec![0.0; nc]; n];
        for b in 0..nb {
            for p in 0..np {
                let e: Vec<f64> = (0..nc)
                    .map(|c| (logits.values()[(b * nc + c) * np + p] / cfg.temperature).exp())
                    .collect();
                let z: f64 = e.iter().sum();
                yhat[b * np + p] = e.iter().map(|v| v / z).collect();
            }
        }
        let mut wdiag = vec![vec![0.0; n]; n];
        let raw: Vec<f64> = yhat
            .iter()
            .map(|r| {
                let h: f64 = -r.iter().map(|v| v * v.ln()).sum::<f64>();
                if cfg.entropy_weighting { 1.0 + (-h).exp() } else { 1.0 }
            })
            .collect();
        let tot: f64 = raw.iter().sum();
        for i in 0..n {
            wdiag[i][i] = n as f64 * raw[i] / tot;
        }
        // C = Ŷᵀ (W Ŷ)
        let mut wy = vec![vec![0.0; nc]; n];
        for i in 0..n {
            for c in 0..nc {
                wy[i][c] = (0..n).map(|k| wdiag[i][k] * yhat[k][c]).sum();
            }
        }
        let mut cm = vec![vec![0.0; nc]; nc];
        for a in 0..nc {
            for b in 0..nc {
                cm[a][b] = (0..n).map(|i| yhat[i][a] * wy[i][b]).sum();
            }
        }
        let mut loss = 0.0;
        for a in 0..nc {
            let rs: f64 = cm[a].iter().sum();
            for b in 0..nc {
                if a != b {
                    loss += cm[a][b] / rs;
                }
            }
        }
        loss / nc as f64
    }

    fn pseudo_random(shape: [usize; 4], seed: f64, scale: f64) -> LogitMap {
        let n = shape.iter().product();
        LogitMap::new(
            shape,
            (0..n).map(|i| ((i as f64 + seed) * 78.233).sin() * scale).collect(),
        )
        .unwrap()
    }

    #[test]
    fn hard_one_hot_gives_zero() {
        // pixel p is class (p % 2), both classes present
        let (np, nc) = (16, 2);
        let vals: Vec<f64> = (0..nc * np)
            .map(|i| {
                let (c, p) = (i / np, i % np);
                if c == p % 2 { 100.0 } else { -100.0 }
            })
            .collect();
        let logits = LogitMap::new([1, 2, 4, 4], vals).unwrap();
        assert!(mcc_loss(&logits, &MccConfig::default(), 0).unwrap() < 1e-8);
    }

    #[test]
    fn uniform_two_class_gives_one_half() {
        let logits = LogitMap::new([2, 2, 3, 5], vec![1.25; 60]).unwrap();
        let v = mcc_loss(&logits, &MccConfig::default(), 0).unwrap();
        assert!((v - 0.5).abs() <= 1e-9, "{v}");
    }

    #[test]
    fn matches_reference_formula() {
        let logits = pseudo_random([1, 2, 8, 8], 0.5, 4.0);
        let c = cfg(2.5);
        let got = mcc_loss(&logits, &c, 0).unwrap();
        assert!((got - reference(&logits, &c)).abs() < 1e-6);
        let c = MccConfig { entropy_weighting: false, ..cfg(1.0) };
        let got = mcc_loss(&logits, &c, 0).unwrap();
        assert!((got - reference(&logits, &c)).abs() < 1e-6);
        let three = pseudo_random([2, 3, 4, 4], 2.0, 3.0);
        let got = mcc_loss(&three, &cfg(1.5), 0).unwrap();
        assert!((got - reference(&three, &cfg(1.5))).abs() < 1e-6);
    }

    #[test]
    fn too_few_pixels_is_an_error() {
        let logits = LogitMap::new([1, 3, 1, 2], vec![0.0; 6]).unwrap();
        assert!(matches!(mcc_loss(&logits, &cfg(1.0), 0), Err(Error::Validation(_))));
        let small = MccConfig { pixel_subsample: Some(1), ..cfg(1.0) };
        let logits = LogitMap::new([1, 2, 2, 2], vec![0.0; 8]).unwrap();
        assert!(mcc_loss(&logits, &small, 0).is_err());
    }

    #[test]
    fn subsampling_is_seeded() {
        let logits = pseudo_random([2, 2, 16, 16], 1.0, 2.0);
        let c = MccConfig { pixel_subsample: Some(100), ..cfg(2.5) };
        let a = mcc_loss(&logits, &c, 7).unwrap();
        assert_eq!(a, mcc_loss(&logits, &c, 7).unwrap());
        assert_ne!(a, mcc_loss(&logits, &c, 8).unwrap());
        let (_, g) = mcc_loss_with_grad(&logits, &c, 7).unwrap();
        assert_eq!(g.iter().filter(|v| **v != 0.0).count(), 200);
    }
}
