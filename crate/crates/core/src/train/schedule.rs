use serde::{Deserialize, Serialize};

use crate::error::{PrmError, Result};

/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_at(step: u64, d: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(PrmError::Contract("learning-rate steps start at 1".into()));
    }
    if d == 0 || warmup == 0 {
        return Err(PrmError::Config("lr schedule needs d >= 1 and warmup >= 1".into()));
    }
    let s = step as f64;
    Ok((d as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// Warmup then inverse square-root decay, multiplied by `scale`.
    Noam { d: usize, warmup: u64, scale: f64 },
    Constant { lr: f64 },
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> Result<f64> {
        match *self {
            LrSchedule::Noam { d, warmup, scale } => Ok(scale * lr_at(step, d, warmup)?),
            LrSchedule::Constant { lr } => {
                if step == 0 {
                    Err(PrmError::Contract("learning-rate steps start at 1".into()))
                } else {
                    Ok(lr)
                }
            }
        }
    }
}
