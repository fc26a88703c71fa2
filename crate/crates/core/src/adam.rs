//! Adam optimizer over named parameter tensors.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::scalar::Scalar;
#[allow(unused_imports)]
use num_traits::Float as _;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Moment state is keyed by parameter name, so it survives across graphs
/// and parameters may appear in any order.
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    slots: BTreeMap<String, Slot<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Begin a new optimizer step; call `update` once per parameter after.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) {
        debug_assert!(param.same_shape(grad));
        let n = param.numel();
        let slot = self.slots.entry(String::from(name)).or_insert_with(|| Slot {
            m: alloc::vec![T::zero(); n],
            v: alloc::vec![T::zero(); n],
        });
        let b1 = T::of(self.config.beta1);
        let b2 = T::of(self.config.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - self.config.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - self.config.beta2.powi(self.step as i32));
        let lr = T::of(self.config.lr);
        let eps = T::of(self.config.eps);
        for ((p, &g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data().iter())
            .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_descends() {
        // minimize f(x) = ||x - 3||^2
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        let mut x = Tensor::<f64>::zeros(&[4]);
        for _ in 0..500 {
            adam.begin_step();
            let grad = x.map(|v| 2.0 * (v - 3.0));
            adam.update("x", &mut x, &grad);
        }
        for &v in x.data() {
            assert!((v - 3.0).abs() < 1e-2, "converged to {v}");
        }
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut adam = Adam::new(AdamConfig::with_lr(0.01));
        let mut x = Tensor::<f64>::zeros(&[1]);
        let grad = Tensor::<f64>::full(&[1], 123.0);
        adam.begin_step();
        adam.update("x", &mut x, &grad);
        // bias-corrected first step is -lr * g/|g| up to eps
        assert!((x.data()[0] + 0.01).abs() < 1e-6, "step {}", x.data()[0]);
    }
}
