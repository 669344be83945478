//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::params::ParamVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn for_params(params: &ParamVector, cfg: AdamConfig) -> Self {
        Self::new(params.len(), cfg)
    }
}

/// One Adam update. Inputs are left untouched; updated copies are returned.
pub fn adam_step(
    params: &ParamVector,
    grads: &ParamVector,
    state: &AdamState,
    lr: f64,
) -> Result<(ParamVector, AdamState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    adam_step_in_place(&mut p, grads, &mut s, lr)?;
    Ok((p, s))
}

/// In-place variant of [`adam_step`] for hot loops.
pub fn adam_step_in_place(
    params: &mut ParamVector,
    grads: &ParamVector,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::contract(format!(
            "adam_step dimension mismatch: params {n}, grads {}, state {}/{}",
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if !(lr > 0.0) {
        return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (((p, &g), m), v) in params
        .values_mut()
        .iter_mut()
        .zip(grads.values())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Plain gradient descent, `p <- p - lr * g`.
pub fn sgd_step_in_place(params: &mut ParamVector, grads: &ParamVector, lr: f64) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::contract("sgd_step dimension mismatch"));
    }
    params.axpy(-lr, grads);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::params::LayoutBuilder;
    use proptest::prelude::*;

    fn vec_params(values: Vec<f64>) -> ParamVector {
        let mut b = LayoutBuilder::new();
        b.push("x", &[values.len()]);
        b.zeros().with_values(values).unwrap()
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let p = vec_params(vec![0.5, -1.0, 2.0]);
        let g = p.zeros_like();
        let s = AdamState::for_params(&p, AdamConfig::default());
        let (p2, s2) = adam_step(&p, &g, &s, 1e-3).unwrap();
        assert_eq!(p2.values(), p.values());
        assert_eq!(s2.step_count, 1);
        assert_eq!(s.step_count, 0);
    }

    #[test]
    fn first_step_hand_computed() {
        // m = 0.1, v = 0.001; bias correction makes m_hat = v_hat = 1, so the
        // step is lr / (1 + eps).
        let p = vec_params(vec![0.0]);
        let g = vec_params(vec![1.0]);
        let s = AdamState::for_params(&p, AdamConfig::default());
        let (p2, _) = adam_step(&p, &g, &s, 1e-3).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p2.values()[0] - expected).abs() < 1e-18);
        assert!((p2.values()[0] + 9.99999990e-4).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let p = vec_params(vec![0.0, 1.0]);
        let g = vec_params(vec![1.0]);
        let s = AdamState::for_params(&p, AdamConfig::default());
        assert!(matches!(adam_step(&p, &g, &s, 1e-3), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn identical_coordinates_update_identically(x in -5.0f64..5.0, g in -3.0f64..3.0, steps in 1usize..6) {
            let mut p = vec_params(vec![x, x]);
            let grads = vec_params(vec![g, g]);
            let mut s = AdamState::for_params(&p, AdamConfig::default());
            for _ in 0..steps {
                adam_step_in_place(&mut p, &grads, &mut s, 1e-2).unwrap();
            }
            prop_assert_eq!(p.values()[0], p.values()[1]);
            prop_assert_eq!(s.step_count, steps as u64);
        }

        #[test]
        fn deterministic(x in -5.0f64..5.0, g in -3.0f64..3.0) {
            let p = vec_params(vec![x]);
            let grads = vec_params(vec![g]);
            let s = AdamState::for_params(&p, AdamConfig::default());
            let a = adam_step(&p, &grads, &s, 1e-3).unwrap();
            let b = adam_step(&p, &grads, &s, 1e-3).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
