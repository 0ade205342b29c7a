use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::ParamSet;

/// Adam state: bias-corrected first/second moments per named parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip applied before the update.
    pub max_grad_norm: Option<f64>,
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn with_clip(mut self, max_norm: f64) -> Self {
        self.max_grad_norm = Some(max_norm);
        self
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }

    /// One update using the `grad` buffers stored on `params`. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for (name, t) in params.iter() {
            if let Some(g) = &t.grad {
                if g.len() != t.len() {
                    return Err(Error::input(format!(
                        "gradient for '{name}' has {} entries, parameter has {}",
                        g.len(),
                        t.len()
                    )));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!("non-finite gradient for '{name}'")));
                }
            }
            for m in [&self.first, &self.second] {
                if let Some(m) = m.get(name) {
                    if m.len() != t.len() {
                        return Err(Error::input(format!("moment shape mismatch for '{name}'")));
                    }
                }
            }
        }
        let clip = match self.max_grad_norm {
            Some(max) => {
                let norm = params
                    .iter()
                    .filter_map(|(_, t)| t.grad.as_ref())
                    .flat_map(|g| g.iter())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let n = p.len();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let grad = p.grad.take();
            let data = p.data_mut();
            for i in 0..n {
                let g = grad.as_ref().map_or(0.0, |g| g[i] * clip);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
