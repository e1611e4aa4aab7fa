//! Adam with bias-corrected moment estimates.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::array::DifferentiableArray;
use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
    pub fn for_param(param: &DifferentiableArray) -> Self {
        Self {
            first_moment: vec![0.0; param.len()],
            second_moment: vec![0.0; param.len()],
            step_count: 0,
        }
    }
}

/// One Adam update of `param` in place. The gradient is left untouched.
pub fn adam_step(
    name: &str,
    param: &mut DifferentiableArray,
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if state.first_moment.len() != param.len() || state.second_moment.len() != param.len() {
        return Err(Error::config(format!(
            "Adam state for `{name}` does not match parameter size {}",
            param.len()
        )));
    }
    if let Some(i) = param.grad().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of `{name}` is {} at index {i}",
            param.grad()[i]
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let grad = param.grad().to_vec();
    let (m, v) = (&mut state.first_moment, &mut state.second_moment);
    for (i, (p, g)) in param.values_mut().iter_mut().zip(&grad).enumerate() {
        m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
        v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    Ok(())
}

/// Adam over a whole [`ParamSet`]; frozen parameters are never updated.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    states: BTreeMap<String, AdamState>,
    frozen: BTreeSet<String>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn freeze(&mut self, name: impl Into<String>) {
        self.frozen.insert(name.into());
    }

    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for (name, p) in params.iter_mut() {
            if self.frozen.contains(name) || !p.requires_grad() {
                continue;
            }
            let state = self
                .states
                .entry(name.to_string())
                .or_insert_with(|| AdamState::for_param(p));
            adam_step(name, p, state, &self.config)?;
        }
        Ok(())
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }
}
