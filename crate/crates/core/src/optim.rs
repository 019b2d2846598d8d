//! Adam with L2 weight decay folded into the gradient, and a step schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

pub struct Adam {
    config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Adam {
            config,
            m: params.iter().map(|p| Tensor::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.raw_dim())).collect(),
            t: 0,
        }
    }

    /// One update. `grads[i]` of `None` means a zero gradient (decay still applies).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&Tensor>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let ps = p.as_slice_mut().expect("standard layout");
            let ms = m.as_slice_mut().expect("m");
            let vs = v.as_slice_mut().expect("v");
            let gs = grads[i].map(|g| g.as_slice().expect("standard layout"));
            for k in 0..ps.len() {
                let g = gs.map_or(0.0, |g| g[k]) + c.weight_decay * ps[k];
                ms[k] = c.beta1 * ms[k] + (1.0 - c.beta1) * g;
                vs[k] = c.beta2 * vs[k] + (1.0 - c.beta2) * g * g;
                ps[k] -= lr * (ms[k] / bc1) / ((vs[k] / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Learning rate for 1-based `epoch`: `base * gamma^floor((epoch - 1) / step)`.
pub fn step_lr(base: f64, gamma: f64, step: usize, epoch: usize) -> f64 {
    base * gamma.powi((epoch.saturating_sub(1) / step.max(1)) as i32)
}
