use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{Error, Result};
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient; adds `2 · weight_decay · w` to the gradient.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First/second moment estimates for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut Tensor, grad: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let n = param.len();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape {
            op: "adam_step",
            detail: alloc::format!("param {}, grad {}, state {}", n, grad.len(), state.m.len()),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let c2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let w = param.data_mut();
    for i in 0..n {
        let g = grad[i] + 2.0 * cfg.weight_decay * w[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        w[i] -= cfg.lr * m_hat / (math::sqrt(v_hat) + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut st, &AdamConfig::new(0.01, 0.0)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t = 1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let lr = 0.005;
        for g in [3.0, -0.2, 1e-3] {
            let mut p = Tensor::new(&[1], vec![1.0]).unwrap();
            let mut st = AdamState::new(1);
            adam_step(&mut p, &[g], &mut st, &AdamConfig::new(lr, 0.0)).unwrap();
            let expected = lr * g.abs() / (g.abs() + 1e-8);
            assert!(((1.0 - p.data()[0]).abs() - expected).abs() < 1e-12);
            assert!(((1.0 - p.data()[0]).abs() - lr).abs() < 1e-6);
        }
    }

    #[test]
    fn weight_decay_adds_l2_gradient() {
        let mut a = Tensor::new(&[1], vec![2.0]).unwrap();
        let mut b = a.clone();
        let (mut sa, mut sb) = (AdamState::new(1), AdamState::new(1));
        adam_step(&mut a, &[0.3], &mut sa, &AdamConfig::new(0.01, 0.1)).unwrap();
        adam_step(&mut b, &[0.3 + 2.0 * 0.1 * 2.0], &mut sb, &AdamConfig::new(0.01, 0.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut p = Tensor::zeros(&[2]);
        assert!(adam_step(&mut p, &[1.0], &mut AdamState::new(2), &AdamConfig::new(0.1, 0.0)).is_err());
    }
}
