use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> AdamState {
        AdamState {
            config,
            m: params.zero_grads(),
            v: params.zero_grads(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.v[index]
    }

    /// One bias-corrected Adam update. Non-finite gradients abort before
    /// anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidInput(format!(
                "{} gradient buffers for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for id in params.ids() {
            let g = &grads[id.index()];
            if g.len() != params.get(id).len() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: params.get(id).shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter `{}` contains {bad}",
                    params.name(id)
                )));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in params.ids() {
            let i = id.index();
            let g = &grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradient buffers so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = max_norm / total;
        grads
            .iter_mut()
            .flat_map(|g| g.iter_mut())
            .for_each(|x| *x *= s);
    }
    total
}
