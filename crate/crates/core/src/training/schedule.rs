use crate::error::{LiftError, Result};

/// Inverse-square-root schedule with linear warmup:
/// `max_lr · min(step / warmup, sqrt(warmup / step))`.
///
/// Peaks at exactly `max_lr` when `step == warmup_steps`.
pub fn lr_at(step: u64, max_lr: f64, warmup_steps: u64) -> Result<f64> {
    if step == 0 {
        return Err(LiftError::ZeroStep);
    }
    if warmup_steps == 0 {
        return Err(LiftError::config("warmup_steps", "must be at least 1"));
    }
    let (s, w) = (step as f64, warmup_steps as f64);
    let factor = if step <= warmup_steps { s / w } else { (w / s).sqrt() };
    Ok(max_lr * factor)
}
