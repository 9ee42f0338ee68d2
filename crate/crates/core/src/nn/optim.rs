use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily on the
/// first step and follow the store's parameter order.
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the store's accumulated gradients.
    pub fn step(&mut self, ps: &mut ParamStore) {
        if self.m.is_empty() {
            for id in ps.ids() {
                self.m.push(Tensor::zeros(ps.value(id).shape()));
                self.v.push(Tensor::zeros(ps.value(id).shape()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, id) in ps.ids().enumerate() {
            let grad = ps.grad(id).clone();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let value = ps.value_mut(id).data_mut();
            for (((p, g), mm), vv) in value.iter_mut().zip(grad.data()).zip(m).zip(v) {
                *mm = beta1 * *mm + (1.0 - beta1) * g;
                *vv = beta2 * *vv + (1.0 - beta2) * g * g;
                let mhat = *mm / bc1;
                let vhat = *vv / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::matrix(1, 3, vec![0.1, -2.5, 3.75]));
        let before = ps.value(id).clone();
        ps.grad_mut(id).data_mut().copy_from_slice(&[1.0, -3.0, 0.5]);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        });
        adam.step(&mut ps);
        let after = ps.value(id);
        for (a, b) in before.data().iter().zip(after.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn first_step_moves_each_weight_by_lr_against_gradient_sign() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::matrix(1, 2, vec![1.0, 1.0]));
        ps.grad_mut(id).data_mut().copy_from_slice(&[4.0, -0.01]);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        adam.step(&mut ps);
        let v = ps.value(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] - 1.1).abs() < 1e-5);
    }
}
