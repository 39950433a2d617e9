//! Learnable annealing schedule and integrator hyperparameters.
//!
//! Flat parameter layout: `raw_beta (K) ++ [raw_eta, raw_kappa, raw_gamma] ++ raw_mass (D)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Var};
use crate::error::{Error, Result};

pub const DEFAULT_ETA_MAX: f64 = 0.25;
pub const DEFAULT_ETA_INIT: f64 = 1e-3;
pub const DEFAULT_GAMMA_INIT: f64 = 0.9;
const GAMMA_CEIL: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealingState {
    pub raw_beta: Vec<f64>,
    pub raw_eta: f64,
    pub raw_kappa: f64,
    pub eta_max: f64,
    pub raw_gamma: f64,
    pub raw_mass: Vec<f64>,
    /// When set, γ is this constant instead of a function of `raw_gamma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_gamma: Option<f64>,
}

/// Inverse of `γ = 0.999·sigmoid(raw)`.
pub fn raw_gamma_for(gamma: f64) -> Result<f64> {
    if !(0.0..GAMMA_CEIL).contains(&gamma) || gamma == 0.0 {
        return Err(Error::usage(format!("gamma {gamma} not representable; use a fixed gamma")));
    }
    let p = gamma / GAMMA_CEIL;
    Ok((p / (1.0 - p)).ln())
}

impl AnnealingState {
    /// Equal temperature increments, `η̃ = 1e-3`, `κ = 0`, `γ = 0.9`, `M = I`.
    pub fn new(k: usize, dim: usize) -> Self {
        Self {
            raw_beta: vec![0.0; k],
            raw_eta: DEFAULT_ETA_INIT,
            raw_kappa: 0.0,
            eta_max: DEFAULT_ETA_MAX,
            raw_gamma: raw_gamma_for(DEFAULT_GAMMA_INIT).expect("default gamma is interior"),
            raw_mass: vec![0.0; dim],
            fixed_gamma: None,
        }
    }

    pub fn with_fixed_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::usage(format!("gamma must lie in [0, 1), got {gamma}")));
        }
        self.fixed_gamma = Some(gamma);
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.raw_beta.len()
    }

    pub fn dim(&self) -> usize {
        self.raw_mass.len()
    }

    pub fn n_params(&self) -> usize {
        self.k() + 3 + self.dim()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.raw_beta.clone();
        p.extend([self.raw_eta, self.raw_kappa, self.raw_gamma]);
        p.extend_from_slice(&self.raw_mass);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::usage(format!("expected {} annealing parameters, got {}", self.n_params(), p.len())));
        }
        let k = self.k();
        self.raw_beta.copy_from_slice(&p[..k]);
        self.raw_eta = p[k];
        self.raw_kappa = p[k + 1];
        self.raw_gamma = p[k + 2];
        self.raw_mass.copy_from_slice(&p[k + 3..]);
        Ok(())
    }

    /// Index ranges of (η̃, κ), γ and M within [`Self::params`].
    pub fn layout(&self) -> AnnealLayout {
        let k = self.k();
        AnnealLayout {
            beta: 0..k,
            step: k..k + 2,
            gamma: k + 2..k + 3,
            mass: k + 3..k + 3 + self.dim(),
        }
    }

    /// `β_k = cumsum(exp(raw))_k / Σ exp(raw)`. The maximum is subtracted first for range.
    pub fn betas(&self) -> Vec<f64> {
        let max = self.raw_beta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let incr: Vec<f64> = self.raw_beta.iter().map(|r| (r - max).exp()).collect();
        let total: f64 = incr.iter().sum();
        let mut acc = 0.0;
        let mut out: Vec<f64> = incr
            .iter()
            .map(|w| {
                acc += w;
                acc / total
            })
            .collect();
        if let Some(last) = out.last_mut() {
            *last = 1.0;
        }
        out
    }

    pub fn step_size(&self, beta: f64) -> f64 {
        (self.raw_eta + self.raw_kappa * beta).clamp(0.0, self.eta_max)
    }

    pub fn step_sizes(&self) -> Vec<f64> {
        self.betas().into_iter().map(|b| self.step_size(b)).collect()
    }

    pub fn gamma(&self) -> f64 {
        self.fixed_gamma.unwrap_or_else(|| GAMMA_CEIL * sigmoid(self.raw_gamma))
    }

    pub fn mass_diag(&self) -> Vec<f64> {
        self.raw_mass.iter().map(|r| r.exp()).collect()
    }

    /// Derived quantities recorded on a tape from parameters laid out as [`Self::params`].
    pub fn bind<'t>(&self, p: Var<'t>) -> Result<BoundAnneal<'t>> {
        if p.len() != self.n_params() {
            return Err(Error::usage(format!("expected {} annealing parameters, got {}", self.n_params(), p.len())));
        }
        let tape = p.tape();
        let k = self.k();
        let l = self.layout();
        let (betas, etas) = if k == 0 {
            (Vec::new(), Vec::new())
        } else {
            let raw = p.slice(0, k)?;
            let max = self.raw_beta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let incr = raw.sub(tape.scalar(max)?)?.exp()?;
            let cum = incr.cumsum()?;
            let total = cum.index(k - 1)?;
            let beta_vec = cum.div(total)?;
            let eta = p.index(l.step.start)?;
            let kappa = p.index(l.step.start + 1)?;
            let eta_vec = kappa.mul(beta_vec)?.add(eta)?.clip(0.0, self.eta_max)?;
            let mut betas = Vec::with_capacity(k);
            let mut etas = Vec::with_capacity(k);
            for i in 0..k {
                betas.push(beta_vec.index(i)?);
                etas.push(eta_vec.index(i)?);
            }
            (betas, etas)
        };
        let gamma = match self.fixed_gamma {
            Some(g) => tape.scalar(g)?,
            None => p.index(l.gamma.start)?.sigmoid()?.scale(GAMMA_CEIL)?,
        };
        let mass = p.slice(l.mass.start, self.dim())?.exp()?;
        Ok(BoundAnneal {
            betas,
            etas,
            gamma,
            mass,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnealLayout {
    pub beta: std::ops::Range<usize>,
    pub step: std::ops::Range<usize>,
    pub gamma: std::ops::Range<usize>,
    pub mass: std::ops::Range<usize>,
}

/// Per-step schedule on a tape.
pub struct BoundAnneal<'t> {
    pub betas: Vec<Var<'t>>,
    pub etas: Vec<Var<'t>>,
    pub gamma: Var<'t>,
    pub mass: Var<'t>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;

    fn state(raw_beta: Vec<f64>, eta: f64, kappa: f64) -> AnnealingState {
        let mut s = AnnealingState::new(raw_beta.len(), 2);
        s.raw_beta = raw_beta;
        s.raw_eta = eta;
        s.raw_kappa = kappa;
        s
    }

    #[test]
    fn betas_examples() {
        assert_eq!(state(vec![0.7; 4], 0.0, 0.0).betas(), vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(state(vec![-3.0], 0.0, 0.0).betas(), vec![1.0]);
        let b = state(vec![0.0, 3f64.ln()], 0.0, 0.0).betas();
        assert!((b[0] - 0.25).abs() < 1e-15 && b[1] == 1.0);
    }

    #[test]
    fn step_size_examples() {
        assert_eq!(state(vec![0.0], 0.3, 0.0).step_size(0.7), 0.25);
        assert!((state(vec![0.0], 0.1, 0.2).step_size(0.5) - 0.2).abs() < 1e-15);
        assert_eq!(state(vec![0.0], -0.1, 0.0).step_size(0.3), 0.0);
    }

    #[test]
    fn mass_and_gamma_defaults() {
        let mut s = AnnealingState::new(3, 2);
        assert_eq!(s.mass_diag(), vec![1.0, 1.0]);
        assert!((s.gamma() - 0.9).abs() < 1e-12);
        s.raw_mass = vec![4f64.ln(), 0.0];
        assert!((s.mass_diag()[0] - 4.0).abs() < 1e-12);
        let s = s.with_fixed_gamma(0.0).unwrap();
        assert_eq!(s.gamma(), 0.0);
        assert!(AnnealingState::new(1, 1).with_fixed_gamma(1.0).is_err());
    }

    #[test]
    fn tape_values_match_plain_values() {
        let mut s = state(vec![0.3, -1.0, 2.0, 0.1], 0.05, 0.3);
        s.raw_mass = vec![0.2, -0.4];
        let tape = Tape::new();
        let b = s.bind(tape.var(s.params()).unwrap()).unwrap();
        let betas: Vec<f64> = b.betas.iter().map(|v| v.scalar()).collect();
        let etas: Vec<f64> = b.etas.iter().map(|v| v.scalar()).collect();
        for (x, y) in betas.iter().zip(s.betas()) {
            assert!((x - y).abs() < 1e-15);
        }
        for (x, y) in etas.iter().zip(s.step_sizes()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((b.gamma.scalar() - s.gamma()).abs() < 1e-15);
        assert_eq!(b.mass.value(), s.mass_diag());
    }

    #[test]
    fn params_round_trip() {
        let mut s = AnnealingState::new(3, 2);
        let p: Vec<f64> = (0..s.n_params()).map(|i| i as f64 * 0.1).collect();
        s.set_params(&p).unwrap();
        assert_eq!(s.params(), p);
        assert_eq!(s.layout().mass, 6..8);
    }

    proptest! {
        #[test]
        fn betas_increase_to_one(raw in prop::collection::vec(-15.0f64..15.0, 1..40)) {
            let b = state(raw, 0.0, 0.0).betas();
            prop_assert!(b[0] > 0.0);
            prop_assert!(b.windows(2).all(|w| w[0] < w[1]));
            prop_assert!((b[b.len() - 1] - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn step_size_within_bounds(eta in -1.0f64..1.0, kappa in -1.0f64..1.0, beta in 0.001f64..1.0) {
            let s = state(vec![0.0], eta, kappa);
            let h = s.step_size(beta);
            prop_assert!((0.0..=s.eta_max).contains(&h));
            let raw = eta + kappa * beta;
            if (0.0..=s.eta_max).contains(&raw) {
                prop_assert_eq!(h, raw);
            }
        }
    }
}
