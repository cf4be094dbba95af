use crate::error::{LiftError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Elementwise mean of structurally identical parameter sets.
///
/// Uses a running mean in `f64`, so averaging identical sets reproduces them
/// exactly.
pub fn average_checkpoints<T: Scalar>(sets: &[ParamStore<T>]) -> Result<ParamStore<T>> {
    let first = sets
        .first()
        .ok_or_else(|| LiftError::StructureMismatch("no parameter sets to average".into()))?;
    for s in &sets[1..] {
        first.check_same_structure(s)?;
    }
    let mut out = first.snapshot();
    for id in first.ids() {
        let mut mean: Vec<f64> = first.get(id).to_f64_vec();
        for (k, s) in sets.iter().enumerate().skip(1) {
            let count = (k + 1) as f64;
            for (m, v) in mean.iter_mut().zip(s.get(id).data()) {
                *m += (v.to_f64_lossless() - *m) / count;
            }
        }
        for (dst, m) in out.get_mut(id).data_mut().iter_mut().zip(mean) {
            *dst = T::from_f64_lossy(m);
        }
    }
    Ok(out)
}
