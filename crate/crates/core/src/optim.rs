//! ADAM with global-norm clipping and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Cosine decay from `xi_max` at iteration 0 to `xi_min` at `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub xi_min: f64,
    pub xi_max: f64,
    pub total: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { xi_min: 1e-4, xi_max: 1e-3, total: 30_000 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi_min > 0.0 && self.xi_min <= self.xi_max) {
            return Err(Error::Range(format!(
                "learning rates must satisfy 0 < xi_min <= xi_max (got {}, {})",
                self.xi_min, self.xi_max
            )));
        }
        if self.total == 0 {
            return Err(Error::Range("iteration budget must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn cosine_lr(l: usize, sched: &LrSchedule) -> Result<f64> {
    if l > sched.total {
        return Err(Error::Range(format!("iteration {l} beyond schedule length {}", sched.total)));
    }
    let frac = l as f64 / sched.total as f64;
    Ok(sched.xi_min + 0.5 * (sched.xi_max - sched.xi_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm threshold; 0 disables clipping.
    pub clip: f64,
}

impl AdamState {
    pub fn new(n: usize, clip: f64) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip }
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], rate: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("optimiser buffers", self.m.len(), grads.len()));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::PoisonedGradient { index });
        }
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, rate: f64) -> Result<()> {
    state.step(params, grads, rate)
}
