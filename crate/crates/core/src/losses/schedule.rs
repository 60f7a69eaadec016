use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RampShape {
    Linear,
    Sigmoid,
}

/// Iteration-dependent weight of the MCC term: zero at the first
/// iteration, rising to `alpha_max` at `ramp_iters` and constant after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaSchedule {
    pub alpha_max: f64,
    pub ramp_iters: u64,
    pub shape: RampShape,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule {
            alpha_max: 1.0,
            ramp_iters: 200,
            shape: RampShape::Linear,
        }
    }
}

/// Steepness of the logistic ramp.
const SIGMOID_STEEPNESS: f64 = 10.0;

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl AlphaSchedule {
    /// Ramp over the first tenth of a run, the default for `total_iters`.
    pub fn for_run(total_iters: u64) -> Self {
        AlphaSchedule {
            ramp_iters: (total_iters / 10).max(1),
            ..AlphaSchedule::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_max >= 0.0) || !self.alpha_max.is_finite() {
            return Err(Error::validation("alpha_schedule.alpha_max must be >= 0"));
        }
        if self.ramp_iters < 1 {
            return Err(Error::validation("alpha_schedule.ramp_iters must be >= 1"));
        }
        Ok(())
    }
}

/// MCC weight at `iteration`.
pub fn alpha_at(schedule: &AlphaSchedule, iteration: u64) -> f64 {
    if iteration >= schedule.ramp_iters {
        return schedule.alpha_max;
    }
    let progress = iteration as f64 / schedule.ramp_iters as f64;
    let frac = match schedule.shape {
        RampShape::Linear => progress,
        RampShape::Sigmoid => {
            // logistic rescaled so the ramp starts at exactly 0 and ends at 1
            let k = SIGMOID_STEEPNESS;
            let lo = logistic(-k / 2.0);
            let hi = logistic(k / 2.0);
            (logistic(k * (progress - 0.5)) - lo) / (hi - lo)
        }
    };
    schedule.alpha_max * frac
}
