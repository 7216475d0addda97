//! Adam optimizer over a parameter store.

use std::collections::HashMap;

use crate::nn::ParamStore;
use crate::tape::Grads;
use crate::tensor::Tensor;

pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    state: HashMap<u64, (Tensor, Tensor)>,
    step_count: u64,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: HashMap::new(),
            step_count: 0,
        }
    }

    /// Apply one update. Walks the store in registration order so updates are
    /// deterministic; parameters without a gradient (frozen or unused) are
    /// left untouched.
    pub fn step(&mut self, store: &ParamStore, grads: &Grads) {
        self.step_count += 1;
        let t = self.step_count as f32;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for p in store.iter() {
            if !p.trainable() {
                continue;
            }
            let Some(g) = grads.param_by_id(p.id()) else {
                continue;
            };
            let (m, v) = self
                .state
                .entry(p.id())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let mut value = p.value();
            {
                let md = m.data_mut();
                let vd = v.data_mut();
                let xd = value.data_mut();
                for i in 0..g.numel() {
                    let gi = g.data()[i];
                    md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                    vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                    let mhat = md[i] / bc1;
                    let vhat = vd[i] / bc2;
                    xd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
            p.set_value(value);
        }
    }
}
