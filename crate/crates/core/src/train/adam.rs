use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScanetError};
use crate::nn::ParamStore;

/// Optimiser hyper-parameters (the learning rate is passed per step).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Moments keyed by parameter name and the shared step counter.
///
/// Moments are kept in f64 so long runs do not lose small second-moment
/// contributions; parameters stay f32.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// One bias-corrected Adam update of `theta` in place. `t` is the step
/// number after incrementing (1 on the first step).
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Applies one Adam step to every learnable tensor of `store`. Gradients are
/// left in place for the caller to zero.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    // validate first so a missing gradient leaves the store untouched
    for (name, t) in store.learnable() {
        if t.grad().is_none() {
            return Err(ScanetError::MissingGradient(name.to_string()));
        }
    }
    state.t += 1;
    let step = state.t;
    for (name, tensor, kind) in store.iter_mut() {
        if kind != crate::nn::ParamKind::Learnable {
            continue;
        }
        let n = tensor.numel();
        let mom = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
        if mom.m.len() != n {
            return Err(ScanetError::shape("adam_step", format!("`{name}` has {n} values but its moments {}", mom.m.len())));
        }
        let grad: Vec<f64> = tensor.grad().expect("checked above").iter().map(|&g| g as f64).collect();
        let mut theta: Vec<f64> = tensor.data().iter().map(|&x| x as f64).collect();
        adam_update(&mut theta, &grad, &mut mom.m, &mut mom.v, step, lr, cfg);
        for (dst, src) in tensor.data_mut().iter_mut().zip(&theta) {
            *dst = *src as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn scalar_store(theta: f32, grad: Option<f32>) -> ParamStore {
        let mut store = ParamStore::new();
        store.add_param("w", Tensor::scalar(theta)).unwrap();
        if let Some(g) = grad {
            store.get_mut("w").unwrap().accumulate_grad(&[g]).unwrap();
        }
        store
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(0.0, Some(1.0));
        let mut st = AdamState::new();
        adam_step(&mut store, &mut st, 1e-3, &AdamConfig::default()).unwrap();
        let w = store.get("w").unwrap().data()[0] as f64;
        assert!((w + 1e-3).abs() < 1e-9, "{w}");
        assert_eq!(st.t, 1);
        // gradient left for the caller
        assert_eq!(store.get("w").unwrap().grad(), Some(&[1.0f32][..]));
    }

    #[test]
    fn zero_gradient_and_zero_lr_leave_params_unchanged() {
        let mut store = scalar_store(0.25, Some(0.0));
        adam_step(&mut store, &mut AdamState::new(), 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(store.get("w").unwrap().data()[0].to_bits(), 0.25f32.to_bits());

        let mut store = ParamStore::new();
        let init = Tensor::from_fn(Shape::new(2, 3, 1, 1), |i| (i as f32 * 0.37).sin());
        store.add_param("a", init.clone()).unwrap();
        store.get_mut("a").unwrap().accumulate_grad(&[1.0, -2.0, 3.0, 0.5, 1e-3, 7.0]).unwrap();
        let mut st = AdamState::new();
        for _ in 0..3 {
            adam_step(&mut store, &mut st, 0.0, &AdamConfig::default()).unwrap();
        }
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(store.get("a").unwrap()), bits(&init));
    }

    #[test]
    fn missing_gradient_is_named() {
        let mut store = scalar_store(0.0, None);
        let err = adam_step(&mut store, &mut AdamState::new(), 1e-3, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, ScanetError::MissingGradient(ref n) if n == "w"));
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut store = scalar_store(0.0, Some(1.0));
        store.add_buffer("b", Tensor::scalar(3.0)).unwrap();
        let mut st = AdamState::new();
        adam_step(&mut store, &mut st, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(store.get("b").unwrap().data()[0], 3.0);
        assert!(!st.moments.contains_key("b"));
    }

    #[test]
    fn second_moment_stays_non_negative() {
        let mut th = vec![0.0; 4];
        let (mut m, mut v) = (vec![0.0; 4], vec![0.0; 4]);
        for t in 1..=20u64 {
            let g: Vec<f64> = (0..4).map(|i| ((t * 7 + i) as f64).sin() * 10.0).collect();
            adam_update(&mut th, &g, &mut m, &mut v, t, 1e-2, &AdamConfig::default());
            assert!(v.iter().all(|&x| x >= 0.0));
        }
    }
}
