//! AdamW with decoupled weight decay and two learning-rate groups.

use std::collections::HashMap;

use crate::numerics::matrix::Matrix;
use crate::numerics::params::{ParamGroup, ParamTensor};

/// First/second moment buffers for one parameter.
#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
}

/// Optimizer state: per-parameter moments (keyed by parameter name), step
/// count and the Adam constants.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: HashMap<String, Moments>,
}

impl Default for AdamWState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamWState {
    pub fn new() -> Self {
        AdamWState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn moments_for(&mut self, name: &str, rows: usize, cols: usize) -> &mut Moments {
        self.moments
            .entry(name.to_string())
            .or_insert_with(|| Moments {
                m: Matrix::zeros(rows, cols),
                v: Matrix::zeros(rows, cols),
            })
    }
}

/// One decoupled-weight-decay update of a single tensor: the decay shrink
/// param *= 1 - lr*wd is applied separately from the bias-corrected moment
/// step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut ParamTensor,
    moments: &mut Moments,
    step: u64,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    debug_assert!(step >= 1);
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    let decay = 1.0 - lr * weight_decay;
    for ((p, &g), (m, v)) in param
        .value
        .data_mut()
        .iter_mut()
        .zip(param.grad.data())
        .zip(moments.m.data_mut().iter_mut().zip(moments.v.data_mut()))
    {
        *p *= decay;
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One optimizer step over a whole parameter set, routing each tensor to its
/// group learning rate.
pub fn adamw_step(
    params: Vec<&mut ParamTensor>,
    state: &mut AdamWState,
    lr_backbone: f64,
    lr_head: f64,
    weight_decay: f64,
) {
    state.step += 1;
    let (step, beta1, beta2, eps) = (state.step, state.beta1, state.beta2, state.eps);
    for p in params {
        let lr = match p.group {
            ParamGroup::BackboneAdapter => lr_backbone,
            ParamGroup::BgformerHead => lr_head,
        };
        let moments = state.moments_for(&p.name, p.value.rows(), p.value.cols());
        adamw_update(p, moments, step, lr, weight_decay, beta1, beta2, eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(value: f64) -> ParamTensor {
        ParamTensor::new("t", Matrix::filled(1, 1, value), ParamGroup::BgformerHead)
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_param() {
        let mut p = tensor(1.5);
        let mut state = AdamWState::new();
        for step in 1..=10 {
            let m = state.moments_for("t", 1, 1);
            adamw_update(&mut p, m, step, 0.1, 0.0, 0.9, 0.999, 1e-8);
        }
        assert_eq!(p.value.get(0, 0), 1.5);
    }

    #[test]
    fn zero_gradient_with_decay_is_pure_shrink() {
        let mut p = tensor(2.0);
        let mut state = AdamWState::new();
        let (lr, wd) = (0.05, 0.1);
        let m = state.moments_for("t", 1, 1);
        adamw_update(&mut p, m, 1, lr, wd, 0.9, 0.999, 1e-8);
        assert!((p.value.get(0, 0) - 2.0 * (1.0 - lr * wd)).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_update_magnitude_approaches_lr() {
        let mut p = tensor(0.0);
        let mut state = AdamWState::new();
        let lr = 0.01;
        let mut prev = p.value.get(0, 0);
        let mut last_delta = 0.0;
        for step in 1..=2000 {
            p.grad = Matrix::filled(1, 1, 3.0);
            let m = state.moments_for("t", 1, 1);
            adamw_update(&mut p, m, step, lr, 0.0, 0.9, 0.999, 1e-8);
            let cur = p.value.get(0, 0);
            last_delta = (cur - prev).abs();
            prev = cur;
        }
        assert!(
            (last_delta - lr).abs() < 1e-4,
            "step magnitude {last_delta}"
        );
    }

    #[test]
    fn group_routing_uses_group_rate() {
        let mut a = ParamTensor::new("a", Matrix::filled(1, 1, 1.0), ParamGroup::BackboneAdapter);
        let mut h = ParamTensor::new("h", Matrix::filled(1, 1, 1.0), ParamGroup::BgformerHead);
        a.grad = Matrix::filled(1, 1, 1.0);
        h.grad = Matrix::filled(1, 1, 1.0);
        let mut state = AdamWState::new();
        adamw_step(vec![&mut a, &mut h], &mut state, 0.0, 0.1, 0.5);
        // Zero backbone rate freezes the adapter entirely, decay included.
        assert_eq!(a.value.get(0, 0), 1.0);
        assert!(h.value.get(0, 0) < 1.0);
        assert_eq!(state.step, 1);
    }
}
