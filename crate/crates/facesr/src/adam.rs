//! Bias-corrected ADAM and the training-rate schedule (initial rate halved
//! every 50 epochs).

use crate::error::{Error, Result};
use crate::networks::VarStore;
use std::collections::BTreeMap;

pub const DEFAULT_LR: f32 = 2e-4;
pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const EPS: f32 = 1e-8;

/// First/second moment buffers keyed by parameter name, plus the step count.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Learning rate at a 0-based epoch: `initial / 2^(epoch / 50)`.
pub fn scheduled_lr(initial: f32, epoch: usize) -> f32 {
    initial / 2f32.powi((epoch / 50) as i32)
}

/// One ADAM update over every parameter in the store that has a gradient.
///
/// Deterministic: parameters are visited in store order. A non-finite
/// gradient aborts with the offending tensor's name.
pub fn adam_step(store: &mut VarStore, state: &mut AdamState, lr: f32) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (name, tensor) in store.iter_mut() {
        let Some(grad) = tensor.grad.as_ref() else { continue };
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
        if m.len() != grad.len() || v.len() != grad.len() {
            return Err(Error::dim("adam_step", format!("moment buffers of {name} do not match parameter size")));
        }
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            tensor.data[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(name: &str, data: Vec<f32>, grad: Vec<f32>) -> VarStore {
        let mut s = VarStore::new();
        let mut t = Tensor::new(&[data.len()], data).unwrap().param();
        t.grad = Some(grad);
        s.insert(name, t);
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = store_with("w", vec![1.0, -2.0, 3.0], vec![0.0; 3]);
        let mut state = AdamState::new();
        adam_step(&mut store, &mut state, 0.1).unwrap();
        assert_eq!(store.get("w").unwrap().data, vec![1.0, -2.0, 3.0]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_is_signed_lr() {
        // With constant gradient g at t=1: update = -lr * g / (|g| + eps')
        // which is -lr * sign(g) to within 1e-6.
        let lr = 0.05f32;
        let mut store = store_with("w", vec![0.0, 0.0], vec![0.73, -1.9]);
        let mut state = AdamState::new();
        adam_step(&mut store, &mut state, lr).unwrap();
        let w = &store.get("w").unwrap().data;
        assert!((w[0] - (-lr)).abs() < 1e-6, "{}", w[0]);
        assert!((w[1] - lr).abs() < 1e-6, "{}", w[1]);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut store = store_with("sam.head.weight", vec![0.0], vec![f32::NAN]);
        let mut state = AdamState::new();
        let err = adam_step(&mut store, &mut state, 0.1).unwrap_err();
        assert!(err.to_string().contains("sam.head.weight"), "{err}");
    }

    #[test]
    fn lr_schedule_halves_every_50_epochs() {
        assert_eq!(scheduled_lr(2e-4, 0), 2e-4);
        assert_eq!(scheduled_lr(2e-4, 49), 2e-4);
        assert_eq!(scheduled_lr(2e-4, 50), 1e-4);
        assert_eq!(scheduled_lr(2e-4, 99), 1e-4);
        assert_eq!(scheduled_lr(2e-4, 100), 5e-5);
    }
}
