//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{Kind, ParamStore};
use crate::tensor::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment buffers for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: BTreeMap::new(),
        }
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }

    /// Updates every weight in `store` from its accumulated gradient, then
    /// zeroes the gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let names: Vec<String> = store
            .iter()
            .filter(|(_, p)| p.kind == Kind::Weight)
            .map(|(n, _)| n.to_string())
            .collect();
        for name in names {
            let tensor = store.get_mut(&name)?;
            let grad = tensor
                .grad()
                .ok_or_else(|| TensorError::MissingGrad(name.clone()))?
                .to_vec();
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(grad.len()));
            if state.first_moment.len() != grad.len() {
                return Err(TensorError::Contract(format!(
                    "optimizer state for `{name}` does not match the parameter shape"
                )));
            }
            state.step_count += 1;
            let bc1 = 1.0 - beta1.powi(state.step_count as i32);
            let bc2 = 1.0 - beta2.powi(state.step_count as i32);
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                let m = beta1 * state.first_moment[i] + (1.0 - beta1) * g;
                let v = beta2 * state.second_moment[i] + (1.0 - beta2) * g * g;
                state.first_moment[i] = m;
                state.second_moment[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                data[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}
