//! Adam optimizer over a parameter store.

use std::collections::BTreeMap;

use crate::autodiff::store::{is_running_stat, ParamStore};
use crate::error::{Error, Result};

/// First/second moment state for Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Applies one Adam update to every trainable parameter that carries a
/// gradient, then clears those gradients. Running statistics are left
/// untouched. A trainable parameter without a gradient is an error: it means
/// the training step forgot to bind it or the tape never reached it.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, tensor) in store.iter_mut() {
        if is_running_stat(name) {
            continue;
        }
        let grad = match tensor.grad.take() {
            Some(g) => g,
            None => {
                return Err(Error::invalid_state(format!(
                    "parameter {name} has no gradient at optimizer step"
                )))
            }
        };
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let data = tensor.data_mut();
        for i in 0..grad.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store_with(name: &str, values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::vector(values));
        s
    }

    #[test]
    fn first_step_moves_by_lr_in_grad_direction() {
        // With bias correction the very first update is lr * sign(g)
        // (up to eps), independent of the gradient magnitude.
        let mut store = store_with("w", vec![1.0, -2.0]);
        store.get_mut("w").unwrap().grad = Some(vec![0.3, -7.0]);
        let mut state = AdamState::new(0.1);
        adam_step(&mut store, &mut state).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((w[1] - (-2.0 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn gradients_cleared_after_step() {
        let mut store = store_with("w", vec![0.5]);
        store.get_mut("w").unwrap().grad = Some(vec![1.0]);
        let mut state = AdamState::new(0.01);
        adam_step(&mut store, &mut state).unwrap();
        assert!(store.get("w").unwrap().grad.is_none());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = store_with("w", vec![0.5]);
        let mut state = AdamState::new(0.01);
        let err = adam_step(&mut store, &mut state).unwrap_err();
        assert!(err.to_string().contains("no gradient"));
    }

    #[test]
    fn running_stats_skipped() {
        let mut store = store_with("bn.running_mean", vec![0.25]);
        store.insert("w", Tensor::vector(vec![1.0]));
        store.get_mut("w").unwrap().grad = Some(vec![2.0]);
        let mut state = AdamState::new(0.1);
        adam_step(&mut store, &mut state).unwrap();
        assert_eq!(store.get("bn.running_mean").unwrap().data(), &[0.25]);
    }

    #[test]
    fn converges_on_quadratic() {
        // Minimize (w - 3)^2 by hand-computed gradients.
        let mut store = store_with("w", vec![0.0]);
        let mut state = AdamState::new(0.1);
        for _ in 0..500 {
            let w = store.get("w").unwrap().data()[0];
            store.get_mut("w").unwrap().grad = Some(vec![2.0 * (w - 3.0)]);
            adam_step(&mut store, &mut state).unwrap();
        }
        let w = store.get("w").unwrap().data()[0];
        assert!((w - 3.0).abs() < 1e-3, "w = {w}");
    }
}
