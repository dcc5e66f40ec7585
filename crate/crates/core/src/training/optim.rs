//! Global-norm gradient clipping and Adam.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::numerics::Tensor;

/// Scales every gradient by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`. Returns the scale applied (1.0 when no clipping happened).
pub fn clip_gradients(store: &ParamStore, grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (id, g) in store.ids().zip(grads.iter()) {
        if !g.all_finite() {
            return Err(Error::Parameter {
                name: store.name(id).to_string(),
                reason: "non-finite gradient".into(),
            });
        }
        sq += g.data().iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok(scale)
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimiser state carried across steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed optimiser steps.
    pub step: u64,
    pub epoch: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub rng_seed: u64,
}

impl TrainState {
    pub fn new(store: &ParamStore, rng_seed: u64) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        TrainState {
            step: 0,
            epoch: 0,
            m: zeros(),
            v: zeros(),
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            rng_seed,
        }
    }
}

/// One bias-corrected Adam update; increments `state.step`.
pub fn adam_step(store: &mut ParamStore, grads: &[Tensor], state: &mut TrainState, lr: f64) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients and {} moment tensors for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.adam;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (k, param) in store.tensors_mut().iter_mut().enumerate() {
        let g = grads[k].data();
        if g.len() != param.numel() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: param.shape().to_vec(),
                rhs: grads[k].shape().to_vec(),
            });
        }
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, p) in param.data_mut().iter_mut().enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(v.to_vec())).unwrap();
        s
    }

    #[test]
    fn clip_examples() {
        let s = store(&[0.0, 0.0]);
        let mut g = vec![Tensor::from_vec(vec![3.0, 4.0])];
        assert_eq!(clip_gradients(&s, &mut g, 5.0).unwrap(), 1.0);
        assert_eq!(g[0].data(), &[3.0, 4.0]);
        let mut g = vec![Tensor::from_vec(vec![6.0, 8.0])];
        assert_eq!(clip_gradients(&s, &mut g, 5.0).unwrap(), 0.5);
        assert_eq!(g[0].data(), &[3.0, 4.0]);
        let mut g = vec![Tensor::zeros(&[2])];
        assert_eq!(clip_gradients(&s, &mut g, 5.0).unwrap(), 1.0);
    }

    #[test]
    fn clip_names_nan_parameter() {
        let s = store(&[0.0]);
        let mut g = vec![Tensor::from_vec(vec![f64::NAN])];
        match clip_gradients(&s, &mut g, 5.0) {
            Err(Error::Parameter { name, .. }) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[1.0, -2.0]);
        let mut st = TrainState::new(&s, 0);
        adam_step(&mut s, &[Tensor::ones(&[2])], &mut st, 0.01).unwrap();
        let w = s.by_name("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-9 && (w[1] + 2.01).abs() < 1e-9);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut s = store(&[0.5]);
        let mut st = TrainState::new(&s, 0);
        adam_step(&mut s, &[Tensor::zeros(&[1])], &mut st, 0.1).unwrap();
        assert_eq!(s.by_name("w").unwrap().data(), &[0.5]);
    }

    #[test]
    fn updates_decay_after_gradient_stops() {
        let mut s = store(&[0.0]);
        let mut st = TrainState::new(&s, 0);
        adam_step(&mut s, &[Tensor::ones(&[1])], &mut st, 0.1).unwrap();
        let mut prev = s.by_name("w").unwrap().data()[0];
        let mut last_delta = f64::INFINITY;
        for _ in 0..20 {
            adam_step(&mut s, &[Tensor::zeros(&[1])], &mut st, 0.1).unwrap();
            let now = s.by_name("w").unwrap().data()[0];
            let delta = (now - prev).abs();
            assert!(delta < last_delta);
            last_delta = delta;
            prev = now;
        }
    }
}
