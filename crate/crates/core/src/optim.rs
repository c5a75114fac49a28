//! Adam over the trainable subset of a [`ParamStore`].

use std::collections::BTreeMap;

use crate::config::OptimConfig;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    /// First and second moments, created lazily for trainable parameters only.
    state: BTreeMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn has_state(&self, id: ParamId) -> bool {
        self.state.contains_key(&id)
    }

    pub fn state_len(&self) -> usize {
        self.state.len()
    }

    /// Applies one update from the accumulated gradients. Frozen parameters
    /// and parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let step_size = T::from_f64(self.lr / c1);
        let inv_c2 = T::from_f64(1.0 / c2);
        let eps = T::from_f64(self.eps);
        for id in store.trainable_ids() {
            let p = store.get_mut(id);
            let Some(grad) = p.grad.as_ref() else { continue };
            let (m, v) = self
                .state
                .entry(id)
                .or_insert_with(|| (vec![T::ZERO; grad.len()], vec![T::ZERO; grad.len()]));
            let g = grad.data();
            let w = p.tensor.data_mut();
            for i in 0..w.len() {
                m[i] = b1 * m[i] + ob1 * g[i];
                v[i] = b2 * v[i] + ob2 * g[i] * g[i];
                w[i] = w[i] - step_size * m[i] / ((v[i] * inv_c2).sqrt() + eps);
            }
        }
    }
}
