//! Bias-corrected ADAM with optional L2 weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::store::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr >= 0.0)
            || !(0.0..1.0).contains(&config.beta1)
            || !(0.0..1.0).contains(&config.beta2)
        {
            return Err(Error::Config(format!("invalid ADAM settings {config:?}")));
        }
        Ok(Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.second.get(name)
    }

    /// One update of every trainable tensor that has a gradient. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient { name: name.clone() });
            }
            let p = params.get(name)?;
            if !p.same_shape(g) {
                return Err(Error::shape(
                    "adam_step",
                    format!("`{name}`: param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            if params.is_frozen(name) {
                continue;
            }
            let p = params.get_mut(name)?;
            let zeros = || Tensor::new(p.shape().to_vec(), vec![0.0; p.len()]).unwrap();
            let m = self.first.entry(name.clone()).or_insert_with(zeros);
            let v = self.second.entry(name.clone()).or_insert_with(zeros);
            for i in 0..p.len() {
                let mut gi = g.data()[i];
                if weight_decay != 0.0 {
                    gi += weight_decay * p.data()[i];
                }
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + eps);
                p.data_mut()[i] -= lr * update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64, g: f64) -> (ParamStore, Gradients) {
        let mut params = ParamStore::new();
        params.insert("p", Tensor::scalar(p));
        let mut grads = Gradients::default();
        grads.insert("p".into(), Tensor::scalar(g));
        (params, grads)
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction, so the step is lr·1/(1+eps).
        let (mut params, grads) = single(0.0, 1.0);
        let mut state = AdamState::new(AdamConfig::default()).unwrap();
        state.step(&mut params, &grads).unwrap();
        let p = params.get("p").unwrap().item();
        assert!((p + 1e-4 / (1.0 + 1e-8)).abs() < 1e-18, "{p}");
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradients_leave_params() {
        let (mut params, grads) = single(0.37, 0.0);
        let mut state = AdamState::new(AdamConfig::default()).unwrap();
        for _ in 0..3 {
            state.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params.get("p").unwrap().item(), 0.37);
        assert_eq!(state.first_moment("p").unwrap().item(), 0.0);
        assert_eq!(state.second_moment("p").unwrap().item(), 0.0);
    }

    #[test]
    fn zero_lr_is_bitwise_identity() {
        let (mut params, grads) = single(-1.234_567_890_123, 3.5);
        let before = params.clone();
        let mut state = AdamState::new(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        })
        .unwrap();
        state.step(&mut params, &grads).unwrap();
        assert_eq!(
            params.get("p").unwrap().item().to_bits(),
            before.get("p").unwrap().item().to_bits()
        );
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut params, grads) = single(1.0, f64::NAN);
        let mut state = AdamState::new(AdamConfig::default()).unwrap();
        let err = state.step(&mut params, &grads).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref name } if name == "p"));
        assert_eq!(state.step, 0);
        assert_eq!(params.get("p").unwrap().item(), 1.0);
    }

    #[test]
    fn repeated_runs_are_identical() {
        let run = || {
            let (mut params, grads) = single(0.5, 0.25);
            let mut state = AdamState::new(AdamConfig::default()).unwrap();
            state.step(&mut params, &grads).unwrap();
            state.step(&mut params, &grads).unwrap();
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_params_are_skipped() {
        let (mut params, grads) = single(2.0, 1.0);
        params.freeze("p");
        let mut state = AdamState::new(AdamConfig::default()).unwrap();
        state.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("p").unwrap().item(), 2.0);
    }
}
