use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moments are indexed like the store they were created for.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One update over every trainable parameter; gradients are cleared afterwards.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.config.lr <= 0.0 {
            return Err(contract("Adam learning rate must be positive"));
        }
        if self.first.len() != store.len() {
            return Err(contract("Adam state does not match parameter store"));
        }
        for id in store.ids() {
            let p = store.get(id);
            if p.requires_grad && p.grad.is_none() {
                return Err(contract(format!("missing gradient for {}", store.name(id))));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (i, (w, g)) in p.value.values_mut().iter_mut().zip(grad.values()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
