use crate::model::LogitMap;
use crate::{is_mask_value, Error, Result, IGNORE};

fn check(logits: &LogitMap, mask: &[u8], operand: &str) -> Result<()> {
    let expected = logits.batch() * logits.plane();
    if mask.len() != expected {
        return Err(Error::shape(format!(
            "{operand}: mask has {} pixels, logits cover {expected}",
            mask.len()
        )));
    }
    if let Some(&v) = mask.iter().find(|&&v| !is_mask_value(v)) {
        return Err(Error::validation(format!(
            "{operand}: mask value {v} outside {{0, 1, 255}}"
        )));
    }
    if let Some(&v) = mask.iter().find(|&&v| v != IGNORE && v as usize >= logits.classes()) {
        return Err(Error::validation(format!(
            "{operand}: label {v} exceeds class count {}",
            logits.classes()
        )));
    }
    Ok(())
}

/// Mean cross-entropy over pixels whose mask value is not 255.
///
/// Returns 0 when every pixel is ignored. `mask` is batch×H×W, row-major.
pub fn ce_ignore(logits: &LogitMap, mask: &[u8]) -> Result<f64> {
    ce_ignore_impl(logits, mask, "target", None)
}

/// [`ce_ignore`] plus its gradient with respect to the logits. The
/// gradient is exactly zero at ignored pixels.
pub fn ce_ignore_with_grad(logits: &LogitMap, mask: &[u8]) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; logits.values().len()];
    let v = ce_ignore_impl(logits, mask, "target", Some(&mut grad))?;
    Ok((v, grad))
}

pub(crate) fn ce_ignore_impl(
    logits: &LogitMap,
    mask: &[u8],
    operand: &str,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    check(logits, mask, operand)?;
    let (nb, nc, np) = (logits.batch(), logits.classes(), logits.plane());
    let n_valid = mask.iter().filter(|&&v| v != IGNORE).count();
    if n_valid == 0 {
        return Ok(0.0);
    }
    let inv = 1.0 / n_valid as f64;
    let x = logits.values();
    let mut total = 0.0;
    let mut row = vec![0.0; nc];
    for b in 0..nb {
        for p in 0..np {
            let label = mask[b * np + p];
            if label == IGNORE {
                continue;
            }
            for (c, r) in row.iter_mut().enumerate() {
                *r = x[logits.index(b, c, p)];
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[label as usize];
            if let Some(g) = grad.as_deref_mut() {
                for (c, &r) in row.iter().enumerate() {
                    let p_c = (r - lse).exp();
                    let target = if c == label as usize { 1.0 } else { 0.0 };
                    g[logits.index(b, c, p)] = (p_c - target) * inv;
                }
            }
        }
    }
    Ok(total * inv)
}
