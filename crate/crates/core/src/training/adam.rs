use crate::error::{LiftError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Adam moments for every tensor of a [`ParamStore`], in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn matches(&self, store: &ParamStore<T>) -> bool {
        self.first.len() == store.len()
            && self.second.len() == store.len()
            && store
                .iter()
                .zip(self.first.iter().zip(&self.second))
                .all(|((_, t), (m, v))| m.len() == t.numel() && v.len() == t.numel())
    }
}

/// One bias-corrected Adam update; gradients are cleared afterwards.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if !state.matches(store) {
        return Err(LiftError::StructureMismatch("optimizer state does not match parameters".into()));
    }
    if let Some(id) = store.ids().find(|&id| store.get(id).grad().is_none()) {
        return Err(LiftError::MissingGradient(store.name(id).to_string()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);

    for (i, (_, p)) in store.iter_mut().enumerate() {
        let grad = p.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, value) in p.data_mut().iter_mut().enumerate() {
            let g = grad[j].to_f64_lossless();
            let mj = b1 * m[j].to_f64_lossless() + (1.0 - b1) * g;
            let vj = b2 * v[j].to_f64_lossless() + (1.0 - b2) * g * g;
            m[j] = T::from_f64_lossy(mj);
            v[j] = T::from_f64_lossy(vj);
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + state.eps);
            *value = T::from_f64_lossy(value.to_f64_lossless() - update);
        }
        p.clear_grad();
    }
    Ok(())
}
