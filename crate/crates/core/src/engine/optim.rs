use alloc::vec::Vec;

use super::{ParamStore, Real, Tensor};
use crate::error::invalid;
use crate::Result;

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
///
/// Per parameter: `v <- momentum * v + (grad + weight_decay * value)` (the
/// decay term only for decayable parameters), then `value <- value - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: T, weight_decay: T) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, lr: T) -> Result<()> {
        if !(lr > T::zero()) {
            return Err(invalid!("learning rate must be positive, got {lr}"));
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let decay = if p.decayable { self.weight_decay } else { T::zero() };
            let values = p.value.data_mut();
            for ((w, vel), &g) in values.iter_mut().zip(v.data_mut()).zip(p.grad.data()) {
                *vel = self.momentum * *vel + (g + decay * *w);
                *w -= lr * *vel;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ParamKind, Parameter};

    fn scalar_store(value: f64, grad: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut p = Parameter::new("w", ParamKind::Other, Tensor::full([1], value));
        p.grad = Tensor::full([1], grad);
        store.push(p).unwrap();
        store
    }

    #[test]
    fn plain_gradient_descent_without_momentum_or_decay() {
        let mut store = scalar_store(1.0, 0.5);
        Sgd::new(0.0, 0.0).step(&mut store, 0.1).unwrap();
        assert_eq!(store.get(0).value.data(), &[1.0 - 0.1 * 0.5]);
    }

    #[test]
    fn zero_grad_zero_velocity_is_a_no_op() {
        let mut store = scalar_store(2.0, 0.0);
        Sgd::new(0.9, 0.0).step(&mut store, 0.1).unwrap();
        assert_eq!(store.get(0).value.data(), &[2.0]);
    }

    #[test]
    fn two_steps_match_hand_computation() {
        // w0 = 1, g = 0.5 constant, mu = 0.9, wd = 0.1, lr = 0.1
        // v1 = 0.5 + 0.1*1 = 0.6;            w1 = 1 - 0.06 = 0.94
        // v2 = 0.9*0.6 + 0.5 + 0.1*0.94 = 1.134; w2 = 0.94 - 0.1134 = 0.8266
        let mut store = scalar_store(1.0, 0.5);
        let mut opt = Sgd::new(0.9, 0.1);
        opt.step(&mut store, 0.1).unwrap();
        assert!((store.get(0).value.data()[0] - 0.94).abs() < 1e-12);
        opt.step(&mut store, 0.1).unwrap();
        assert!((store.get(0).value.data()[0] - 0.8266).abs() < 1e-12);
        assert!((opt.velocity()[0].data()[0] - 1.134).abs() < 1e-12);
    }

    #[test]
    fn non_decayable_skips_weight_decay() {
        let mut store = scalar_store(1.0, 0.0);
        store.get_mut(0).decayable = false;
        Sgd::new(0.9, 0.5).step(&mut store, 0.1).unwrap();
        assert_eq!(store.get(0).value.data(), &[1.0]);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut store = scalar_store(1.0, 1.0);
        assert!(Sgd::new(0.9, 0.0).step(&mut store, 0.0).is_err());
        assert!(Sgd::new(0.9, 0.0).step(&mut store, -1.0).is_err());
    }
}
