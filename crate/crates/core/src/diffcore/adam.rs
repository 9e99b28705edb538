//! Adam with bias correction, keyed by parameter name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

use super::params::ParamSet;

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
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Per-parameter first/second moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One bias-corrected update over every parameter in the set. All
    /// gradients must be populated; they are zeroed afterwards.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for (name, t) in params.iter() {
            if t.grad().is_none() {
                return Err(CoreError::Usage(format!(
                    "adam step with missing gradient for `{name}`"
                )));
            }
        }
        self.step += 1;
        let t_step = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t_step);
        let bc2 = 1.0 - c.beta2.powi(t_step);

        for (name, tensor) in params.iter_mut() {
            let n = tensor.numel();
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; n]);
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(CoreError::ShapeMismatch {
                    op: "adam moments",
                    lhs: vec![n],
                    rhs: vec![m.len()],
                });
            }
            let grad = tensor.grad().expect("checked above").to_vec();
            let values = tensor.values_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}
