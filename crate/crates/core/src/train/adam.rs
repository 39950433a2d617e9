use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bias-corrected Adam that minimizes its objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update to `params` along `-grad`. A non-finite gradient leaves
    /// everything untouched and returns `Ok(false)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<bool> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::usage(format!(
                "Adam state has {} slots, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if !(lr > 0.0) {
            return Err(Error::usage("learning rate must be positive"));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Ok(false);
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(true)
    }
}

/// Piecewise-constant learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub rates: [f64; 3],
    /// Steps at which the second and third rates start. Defaults to 1e5/2e5 for runs of
    /// at least 3e5 steps and to one and two thirds of the run otherwise.
    #[serde(default)]
    pub breakpoints: Option<[usize; 2]>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            rates: [1e-3, 1e-4, 1e-5],
            breakpoints: None,
        }
    }
}

impl LrSchedule {
    pub fn breakpoints_for(&self, total: usize) -> [usize; 2] {
        self.breakpoints.unwrap_or(if total >= 300_000 {
            [100_000, 200_000]
        } else {
            [total / 3, 2 * total / 3]
        })
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let [b1, b2] = self.breakpoints_for(total);
        if step < b1 {
            self.rates[0]
        } else if step < b2 {
            self.rates[1]
        } else {
            self.rates[2]
        }
    }
}
