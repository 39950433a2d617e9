//! Differentiable ELBO estimators: the parametric bound and the annealed DAIS family.
//!
//! Every estimator is a deterministic function of the parameters and a [`NoiseBundle`],
//! so gradients are reparameterized and runs replay exactly.

mod dynamics;
mod estimators;

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::anneal::{AnnealingState, BoundAnneal};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Dataset, ModelDensity};
use crate::rng::sample_minibatch;
use crate::surrogate::Surrogate;
use crate::vardist::{BaseDistribution, BaseKind, BoundBase};

pub use dynamics::{
    kinetic_diff, kinetic_diff_tape, leapfrog, leapfrog_tape, refresh, refresh_log_density, refresh_tape, ChainState,
};
pub use estimators::{Dais, NsDais, Parametric, SlDais};

/// Exogenous randomness for one estimator call.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    pub eps_z: Vec<f64>,
    /// `K + 1` momentum draws: the initial momentum, then one per refresh (the last is unused).
    pub eps_v: Vec<Vec<f64>>,
    /// Minibatches used inside the chain (one for NS-DAIS, `K` for the per-step variant).
    pub chain_batches: Vec<Vec<usize>>,
    /// Minibatch `I` of the final likelihood term; `None` means the full dataset.
    pub final_batch: Option<Vec<usize>>,
}

/// Which minibatches an estimator consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub chain_batches: usize,
    pub final_batch: bool,
}

impl NoiseBundle {
    /// Gaussian noise from `noise`, minibatch indices (chain batches first) from `batches`.
    pub fn draw<R1: Rng + ?Sized, R2: Rng + ?Sized>(
        noise: &mut R1,
        batches: &mut R2,
        dim: usize,
        k: usize,
        n: usize,
        plan: BatchPlan,
    ) -> Result<Self> {
        let mut normal = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut *noise)).collect() };
        let eps_z = normal(dim);
        let eps_v = (0..=k).map(|_| normal(dim)).collect();
        let chain_batches = (0..plan.chain_batches)
            .map(|_| sample_minibatch(n, plan.batch_size, batches))
            .collect::<Result<Vec<_>>>()?;
        let final_batch = if plan.final_batch {
            Some(sample_minibatch(n, plan.batch_size, batches)?)
        } else {
            None
        };
        Ok(Self {
            eps_z,
            eps_v,
            chain_batches,
            final_batch,
        })
    }

    /// Deterministic noise for tests: explicit Gaussian draws and full-data batches.
    pub fn fixed(eps_z: Vec<f64>, eps_v: Vec<Vec<f64>>) -> Self {
        Self {
            eps_z,
            eps_v,
            chain_batches: Vec::new(),
            final_batch: None,
        }
    }
}

/// All learnable state, flattened in the fixed order `q0 ++ anneal ++ surrogate ++ θ`.
pub struct Variational {
    pub q0: BaseDistribution,
    pub anneal: Option<AnnealingState>,
    pub surrogate: Option<Box<dyn Surrogate>>,
    /// Model parameters when model learning is enabled.
    pub theta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub q0: Range<usize>,
    pub anneal: Range<usize>,
    pub surrogate: Range<usize>,
    pub theta: Range<usize>,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.theta.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Variational {
    pub fn layout(&self) -> ParamLayout {
        let a = self.q0.n_params();
        let b = a + self.anneal.as_ref().map_or(0, AnnealingState::n_params);
        let c = b + self.surrogate.as_ref().map_or(0, |s| s.n_params());
        let d = c + self.theta.as_ref().map_or(0, Vec::len);
        ParamLayout {
            q0: 0..a,
            anneal: a..b,
            surrogate: b..c,
            theta: c..d,
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut p = self.q0.params();
        if let Some(a) = &self.anneal {
            p.extend(a.params());
        }
        if let Some(s) = &self.surrogate {
            p.extend(s.params());
        }
        if let Some(t) = &self.theta {
            p.extend_from_slice(t);
        }
        p
    }

    pub fn set_flat(&mut self, p: &[f64]) -> Result<()> {
        let l = self.layout();
        if p.len() != l.len() {
            return Err(Error::usage(format!("expected {} parameters, got {}", l.len(), p.len())));
        }
        self.q0.set_params(&p[l.q0])?;
        if let Some(a) = &mut self.anneal {
            a.set_params(&p[l.anneal])?;
        }
        if let Some(s) = &mut self.surrogate {
            s.set_params(&p[l.surrogate])?;
        }
        if let Some(t) = &mut self.theta {
            t.copy_from_slice(&p[l.theta]);
        }
        Ok(())
    }

    /// Binds every component to slices of the flat tape vector `p`.
    pub fn bind<'a, 't>(&'a self, p: Var<'t>) -> Result<Bound<'a, 't>> {
        let l = self.layout();
        if p.len() != l.len() {
            return Err(Error::usage(format!("expected {} parameters, got {}", l.len(), p.len())));
        }
        let piece = |r: &Range<usize>| p.slice(r.start, r.len());
        let q0 = self.q0.bind(piece(&l.q0)?)?;
        let anneal = match &self.anneal {
            Some(a) => Some(a.bind(piece(&l.anneal)?)?),
            None => None,
        };
        let surrogate = match &self.surrogate {
            Some(s) => Some((s.as_ref(), piece(&l.surrogate)?)),
            None => None,
        };
        let theta = match &self.theta {
            Some(_) => Some(piece(&l.theta)?),
            None => None,
        };
        Ok(Bound {
            q0,
            anneal,
            surrogate,
            theta,
        })
    }
}

/// Learnable state recorded on a tape.
pub struct Bound<'a, 't> {
    pub q0: BoundBase<'t>,
    pub anneal: Option<BoundAnneal<'t>>,
    pub surrogate: Option<(&'a dyn Surrogate, Var<'t>)>,
    pub theta: Option<Var<'t>>,
}

/// Per-step chain diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub etas: Vec<f64>,
    pub betas: Vec<f64>,
    pub kinetic: Vec<f64>,
}

/// A single-sample estimate of the bound.
pub struct ElboEstimate<'t> {
    pub value: Var<'t>,
    pub z_final: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// Everything an estimator reads.
pub struct EstimatorInputs<'a, 't> {
    pub model: &'a ModelDensity,
    pub data: &'a Dataset,
    pub bound: &'a Bound<'a, 't>,
    pub noise: &'a NoiseBundle,
}

pub trait ElboEstimator: Send + Sync {
    fn name(&self) -> &'static str;

    /// Base family used when the configuration does not choose one.
    fn default_base(&self) -> BaseKind;

    fn annealed(&self) -> bool;

    fn needs_surrogate(&self) -> bool {
        false
    }

    fn batch_plan(&self, k: usize, batch_size: usize, per_step_batches: bool) -> BatchPlan;

    fn estimate<'a, 't>(&self, inputs: &EstimatorInputs<'a, 't>) -> Result<ElboEstimate<'t>>;
}

/// Estimators selectable by name.
pub struct EstimatorRegistry {
    entries: BTreeMap<&'static str, Arc<dyn ElboEstimator>>,
}

impl Default for EstimatorRegistry {
    fn default() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.register(Arc::new(Parametric::mean_field()));
        r.register(Arc::new(Parametric::full_rank()));
        r.register(Arc::new(Dais));
        r.register(Arc::new(NsDais));
        r.register(Arc::new(SlDais));
        r
    }
}

impl EstimatorRegistry {
    pub fn register(&mut self, est: Arc<dyn ElboEstimator>) {
        self.entries.insert(est.name(), est);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn ElboEstimator>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::config(format!("unknown method `{name}` (known: {:?})", self.names())))
    }
}

/// Evaluates one estimate and its gradient with respect to the flat parameter vector.
pub fn value_and_grad(
    est: &dyn ElboEstimator,
    model: &ModelDensity,
    data: &Dataset,
    vars: &Variational,
    noise: &NoiseBundle,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let tape = Tape::new();
    let p = tape.var(vars.flat())?;
    let bound = vars.bind(p)?;
    let out = est.estimate(&EstimatorInputs {
        model,
        data,
        bound: &bound,
        noise,
    })?;
    let grad = tape.gradient(out.value, &[p])?.remove(0);
    Ok((out.value.scalar(), grad, out.z_final))
}

/// Evaluates one estimate without a reverse sweep.
pub fn value_only(
    est: &dyn ElboEstimator,
    model: &ModelDensity,
    data: &Dataset,
    vars: &Variational,
    noise: &NoiseBundle,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let p = tape.var(vars.flat())?;
    let bound = vars.bind(p)?;
    let out = est.estimate(&EstimatorInputs {
        model,
        data,
        bound: &bound,
        noise,
    })?;
    Ok((out.value.scalar(), out.z_final))
}
