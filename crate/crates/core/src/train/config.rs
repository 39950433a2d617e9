use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dais::EstimatorRegistry;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Dataset, LikelihoodKind, ModelDensity};
use crate::vardist::BaseKind;

use super::adam::LrSchedule;

/// Gaussian prior `N(mean, precision⁻¹)`. Missing fields default to zero mean and `I / variance`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
    #[serde(default)]
    pub precision: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flags {
    /// Learn the diagonal mass matrix.
    #[serde(default = "yes")]
    pub learn_mass: bool,
    /// NS-DAIS draws a fresh minibatch for every leapfrog step.
    #[serde(default)]
    pub ns_prime: bool,
    /// Standardize covariates to zero mean and unit variance.
    #[serde(default)]
    pub standardize: bool,
    /// Learn the model parameters θ (the log noise scale for linear models).
    #[serde(default)]
    pub learn_model: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self {
            learn_mass: true,
            ns_prime: false,
            standardize: false,
            learn_model: false,
        }
    }
}

/// Parameter groups held fixed during training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Freeze {
    #[serde(default)]
    pub q0: bool,
    #[serde(default)]
    pub beta: bool,
    /// η̃ and κ.
    #[serde(default)]
    pub step_size: bool,
    #[serde(default)]
    pub gamma: bool,
    #[serde(default)]
    pub surrogate: bool,
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

fn default_eval() -> usize {
    10_000
}

fn default_samples() -> usize {
    1
}

fn default_window() -> usize {
    1000
}

fn default_surrogate() -> String {
    "rand".into()
}

fn default_eta_init() -> f64 {
    crate::anneal::DEFAULT_ETA_INIT
}

fn default_eta_max() -> f64 {
    crate::anneal::DEFAULT_ETA_MAX
}

/// One training run. Everything not listed as required has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: String,
    #[serde(default)]
    pub k: usize,
    /// Minibatch size; `None` uses the full dataset.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Size of the random surrogate subset (SL-DAIS with the `rand` surrogate only).
    #[serde(default)]
    pub n_surr: Option<usize>,
    pub seed: u64,
    pub steps: usize,
    #[serde(default)]
    pub lr: LrSchedule,
    /// CSV path, resolved relative to the config file when loaded from disk.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub prior: PriorSpec,
    pub model: LikelihoodKind,
    #[serde(default = "one")]
    pub sigma_obs: f64,
    #[serde(default)]
    pub flags: Flags,
    #[serde(default)]
    pub freeze: Freeze,
    /// Base family; defaults to the method's own.
    #[serde(default)]
    pub base: Option<BaseKind>,
    /// Initial q₀ from a saved base distribution or checkpoint.
    #[serde(default)]
    pub q0_init: Option<PathBuf>,
    #[serde(default = "default_eta_init")]
    pub eta_init: f64,
    #[serde(default = "default_eta_max")]
    pub eta_max: f64,
    #[serde(default)]
    pub gamma_init: Option<f64>,
    /// Holds γ at this value (0 allowed) instead of learning it.
    #[serde(default)]
    pub fixed_gamma: Option<f64>,
    #[serde(default = "default_surrogate")]
    pub surrogate: String,
    #[serde(default)]
    pub delta_a: Option<Vec<f64>>,
    #[serde(default)]
    pub delta_b: Option<Vec<Vec<f64>>>,
    /// ELBO samples averaged per optimizer step.
    #[serde(default = "default_samples")]
    pub samples_per_step: usize,
    #[serde(default = "default_eval")]
    pub eval_samples: usize,
    #[serde(default = "default_window")]
    pub divergence_window: usize,
    /// Record elapsed time in the metrics; off gives reproducible bytes.
    #[serde(default = "yes")]
    pub wall_clock: bool,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    /// Minimal configuration with defaults everywhere else.
    pub fn new(method: &str, model: LikelihoodKind, seed: u64, steps: usize) -> Self {
        Self {
            method: method.into(),
            k: 0,
            batch_size: None,
            n_surr: None,
            seed,
            steps,
            lr: LrSchedule::default(),
            data: None,
            prior: PriorSpec::default(),
            model,
            sigma_obs: 1.0,
            flags: Flags::default(),
            freeze: Freeze::default(),
            base: None,
            q0_init: None,
            eta_init: default_eta_init(),
            eta_max: default_eta_max(),
            gamma_init: None,
            fixed_gamma: None,
            surrogate: default_surrogate(),
            delta_a: None,
            delta_b: None,
            samples_per_step: 1,
            eval_samples: default_eval(),
            divergence_window: default_window(),
            wall_clock: true,
            checkpoint: None,
        }
    }

    /// Reads a config file; relative paths inside it are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data, &mut cfg.q0_init, &mut cfg.checkpoint].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        let est = EstimatorRegistry::default().get(&self.method)?;
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !est.annealed() && self.k > 0 {
            return Err(Error::config(format!("method `{}` has no chain; k must be 0", self.method)));
        }
        let wants_n_surr = est.needs_surrogate() && self.surrogate == "rand";
        match (wants_n_surr, self.n_surr) {
            (true, None) => return Err(Error::config("sl-dais with the rand surrogate needs n_surr")),
            (false, Some(_)) => {
                return Err(Error::config(format!(
                    "n_surr only applies to sl-dais with the rand surrogate (method `{}`)",
                    self.method
                )))
            }
            (true, Some(0)) => return Err(Error::config("n_surr must be at least 1")),
            _ => {}
        }
        if self.flags.ns_prime && self.method != "ns-dais" {
            return Err(Error::config("ns_prime only applies to ns-dais"));
        }
        if self.lr.rates.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(self.sigma_obs > 0.0) {
            return Err(Error::config("sigma_obs must be positive"));
        }
        if !(self.eta_max > 0.0) || self.eta_init < 0.0 {
            return Err(Error::config("eta_max must be positive and eta_init nonnegative"));
        }
        if let Some(g) = self.fixed_gamma {
            if !(0.0..1.0).contains(&g) {
                return Err(Error::config("fixed_gamma must lie in [0, 1)"));
            }
        }
        if self.samples_per_step == 0 || self.divergence_window == 0 {
            return Err(Error::config("samples_per_step and divergence_window must be at least 1"));
        }
        if self.flags.learn_model && self.model != LikelihoodKind::Linear {
            return Err(Error::config("learn_model is only defined for linear models"));
        }
        if self.flags.learn_model && self.surrogate == "quadratic" && est.needs_surrogate() {
            return Err(Error::config("the quadratic surrogate has a fixed noise scale; disable learn_model"));
        }
        Ok(())
    }

    /// Batch size resolved against the data.
    pub fn resolved_batch(&self, n: usize) -> Result<usize> {
        let b = self.batch_size.unwrap_or(n);
        if b == 0 || b > n {
            return Err(Error::config(format!("batch_size {b} must lie in 1..={n}")));
        }
        Ok(b)
    }

    pub fn base_kind(&self) -> Result<BaseKind> {
        Ok(match self.base {
            Some(b) => b,
            None => EstimatorRegistry::default().get(&self.method)?.default_base(),
        })
    }

    pub fn build_model(&self, d: usize) -> Result<ModelDensity> {
        let mean = self.prior.mean.clone().unwrap_or_else(|| vec![0.0; d]);
        if mean.len() != d {
            return Err(Error::config(format!("prior mean has length {}, data have {d} covariates", mean.len())));
        }
        let precision = match (&self.prior.precision, self.prior.variance) {
            (Some(_), Some(_)) => return Err(Error::config("give either prior.precision or prior.variance")),
            (Some(rows), None) => {
                if rows.len() != d {
                    return Err(Error::config(format!("prior precision has {} rows, expected {d}", rows.len())));
                }
                Matrix::from_rows(rows).map_err(|e| Error::config(format!("prior precision: {e}")))?
            }
            (None, v) => {
                let v = v.unwrap_or(1.0);
                if !(v > 0.0) {
                    return Err(Error::config("prior variance must be positive"));
                }
                Matrix::from_diag(&vec![1.0 / v; d])
            }
        };
        ModelDensity::new(self.model, mean, precision, self.sigma_obs)
            .map_err(|e| Error::config(format!("prior: {e}")))
    }

    /// Loads the configured CSV, standardizing if asked.
    pub fn load_data(&self) -> Result<Dataset> {
        let path = self
            .data
            .as_ref()
            .ok_or_else(|| Error::config("config has no `data` path"))?;
        let data = super::data::load_csv(path)?;
        Ok(if self.flags.standardize {
            data.standardized()
        } else {
            data
        })
    }
}
