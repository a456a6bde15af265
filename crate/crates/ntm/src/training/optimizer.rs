//! Elementwise gradient clipping and the RMSProp variant with momentum
//! used for all training runs: running mean square `n`, running mean `g`,
//! and a momentum buffer `delta`, updated per component as
//!
//!   n     <- rho * n + (1 - rho) * grad^2
//!   g     <- rho * g + (1 - rho) * grad
//!   delta <- momentum * delta - lr * grad / sqrt(n - g^2 + eps)
//!   theta <- theta + delta

use std::collections::BTreeMap;

use crate::autodiff::ParameterStore;

/// Clamp every gradient component to [-bound, bound].
pub fn clip_gradients(store: &mut ParameterStore, bound: f64) {
    for (_, entry) in store.iter_mut() {
        for g in entry.grad.iter_mut() {
            *g = g.clamp(-bound, bound);
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamSlots {
    pub mean_square: Vec<f64>,
    pub mean: Vec<f64>,
    pub delta: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub momentum: f64,
    pub rho: f64,
    pub eps: f64,
    pub slots: BTreeMap<String, ParamSlots>,
}

impl RmsProp {
    pub fn new(learning_rate: f64) -> Self {
        RmsProp {
            learning_rate,
            momentum: 0.9,
            rho: 0.95,
            eps: 1e-4,
            slots: BTreeMap::new(),
        }
    }

    /// One update from the (already clipped) gradients in the store.
    pub fn update(&mut self, store: &mut ParameterStore) {
        for (name, entry) in store.iter_mut() {
            let slots = self.slots.entry(name.clone()).or_insert_with(|| ParamSlots {
                mean_square: vec![0.0; entry.value.len()],
                mean: vec![0.0; entry.value.len()],
                delta: vec![0.0; entry.value.len()],
            });
            for i in 0..entry.value.len() {
                let g = entry.grad[i];
                slots.mean_square[i] = self.rho * slots.mean_square[i] + (1.0 - self.rho) * g * g;
                slots.mean[i] = self.rho * slots.mean[i] + (1.0 - self.rho) * g;
                let variance = slots.mean_square[i] - slots.mean[i] * slots.mean[i];
                slots.delta[i] =
                    self.momentum * slots.delta[i] - self.learning_rate * g / (variance + self.eps).sqrt();
                entry.value[i] += slots.delta[i];
            }
        }
    }
}
