use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warmup followed by cosine decay.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
}

impl ScheduleSpec {
    pub fn new(total_steps: usize, lr_peak: f64) -> Self {
        Self {
            total_steps,
            warmup_fraction: 0.03,
            lr_peak,
            lr_end: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid(format!(
                "warmup fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if !(self.lr_peak.is_finite() && self.lr_end.is_finite()) || self.lr_peak < 0.0 || self.lr_end < 0.0 {
            return Err(Error::invalid("learning rates must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Number of warmup steps, `ceil(warmup_fraction * total_steps)`.
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).ceil() as usize
    }
}

/// Learning rate at `step` (0-based, `step <= total_steps`).
pub fn lr_at(step: usize, spec: &ScheduleSpec) -> Result<f64> {
    spec.validate()?;
    if step > spec.total_steps {
        return Err(Error::invalid(format!(
            "step {step} beyond schedule of {} steps",
            spec.total_steps
        )));
    }
    let warmup = spec.warmup_steps();
    if step < warmup {
        return Ok(spec.lr_peak * step as f64 / warmup as f64);
    }
    let decay = spec.total_steps - warmup;
    if decay == 0 {
        return Ok(spec.lr_peak);
    }
    let progress = (step - warmup) as f64 / decay as f64;
    Ok(spec.lr_end + (spec.lr_peak - spec.lr_end) * 0.5 * (1.0 + (PI * progress).cos()))
}
