//! First-order optimizers over flat parameter slices.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adam moments for one parameter block.
#[derive(Clone, Debug)]
pub struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamSlot {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len] }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0 }
    }

    /// Advances the shared step counter; call once per optimizer step before
    /// updating the blocks.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn update(&self, slot: &mut AdamSlot, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = slot.m[i] / bc1;
            let vhat = slot.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

pub fn sgd_update(lr: f64, params: &mut [f64], grads: &[f64]) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut adam = Adam::new(0.05);
        let mut slot = AdamSlot::new(2);
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 8.0 * p[1]];
            adam.tick();
            adam.update(&mut slot, &mut p, &g);
        }
        assert!(p[0].abs() < 1e-3 && p[1].abs() < 1e-3);
    }

    #[test]
    fn zero_rate_leaves_parameters_untouched() {
        let mut adam = Adam::new(0.0);
        let mut slot = AdamSlot::new(3);
        let mut p = vec![0.1, -0.2, 0.3];
        let before = p.clone();
        adam.tick();
        adam.update(&mut slot, &mut p, &[1.0, 2.0, 3.0]);
        sgd_update(0.0, &mut p, &[1.0, 2.0, 3.0]);
        assert_eq!(p, before);
    }

    #[test]
    fn first_adam_step_has_magnitude_lr() {
        let mut adam = Adam::new(0.01);
        let mut slot = AdamSlot::new(1);
        let mut p = vec![0.0];
        adam.tick();
        adam.update(&mut slot, &mut p, &[123.0]);
        assert!((p[0] + 0.01).abs() < 1e-9);
    }
}
