//! Surrogate log likelihoods that steer the annealed dynamics in place of the full data.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{DataView, Dataset, LikelihoodKind, ModelDensity};
use crate::oracle::{likelihood_quadratic, rows_of};

/// A stand-in for `Ψ_L(D, z)` with its own learnable parameters.
pub trait Surrogate: Send + Sync {
    fn name(&self) -> &'static str;

    fn n_params(&self) -> usize;

    fn params(&self) -> Vec<f64>;

    fn set_params(&mut self, p: &[f64]) -> Result<()>;

    /// `Ψ̂_L(z)` with surrogate parameters `p`.
    fn log_lik<'t>(&self, model: &ModelDensity, z: Var<'t>, theta: Option<Var<'t>>, p: Var<'t>) -> Result<Var<'t>>;

    /// `∇_z Ψ̂_L(z)`, differentiable in `z`, θ and `p`.
    fn grad_log_lik<'t>(&self, model: &ModelDensity, z: Var<'t>, theta: Option<Var<'t>>, p: Var<'t>)
        -> Result<Var<'t>>;

    fn to_json(&self) -> SurrogateJson;
}

/// Checkpoint form of a surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SurrogateJson {
    Rand {
        indices: Vec<usize>,
        raw_log_weights: Vec<f64>,
    },
    Quadratic {
        delta_a: Vec<f64>,
        delta_b: Vec<Vec<f64>>,
    },
}

impl SurrogateJson {
    /// Rebuilds the surrogate against its originating dataset.
    pub fn restore(&self, data: &Dataset, model: &ModelDensity) -> Result<Box<dyn Surrogate>> {
        Ok(match self {
            SurrogateJson::Rand {
                indices,
                raw_log_weights,
            } => Box::new(RandSurrogate::from_parts(data, indices.clone(), raw_log_weights.clone())?),
            SurrogateJson::Quadratic { delta_a, delta_b } => {
                let d = delta_a.len();
                let db = DMatrix::from_row_iterator(d, d, delta_b.iter().flatten().copied());
                Box::new(QuadraticSurrogate::new(data, model, DVector::from_column_slice(delta_a), db)?)
            }
        })
    }
}

/// Weighted random subset of the data: `Ψ̂_L(z) = Σ ωₙ log p(ỹₙ | z, x̃ₙ)`, `ω = exp(raw)`.
#[derive(Debug, Clone)]
pub struct RandSurrogate {
    indices: Vec<usize>,
    view: DataView,
    raw_log_weights: Vec<f64>,
    n: usize,
}

impl RandSurrogate {
    /// `n_surr` points drawn uniformly without replacement, all weights `N / n_surr`.
    pub fn init_rand<R: Rng + ?Sized>(data: &Dataset, n_surr: usize, rng: &mut R) -> Result<Self> {
        let n = data.n();
        if n_surr == 0 || n_surr > n {
            return Err(Error::usage(format!("n_surr = {n_surr} must lie in 1..={n}")));
        }
        let mut indices = rand::seq::index::sample(rng, n, n_surr).into_vec();
        indices.sort_unstable();
        let raw = (n as f64 / n_surr as f64).ln();
        Self::from_parts(data, indices, vec![raw; n_surr])
    }

    pub fn from_parts(data: &Dataset, indices: Vec<usize>, raw_log_weights: Vec<f64>) -> Result<Self> {
        if indices.is_empty() || indices.len() != raw_log_weights.len() {
            return Err(Error::usage("surrogate needs one weight per point and at least one point"));
        }
        let view = data.view(&indices)?;
        Ok(Self {
            indices,
            view,
            raw_log_weights,
            n: data.n(),
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn weights(&self) -> Vec<f64> {
        self.raw_log_weights.iter().map(|r| r.exp()).collect()
    }

    pub fn source_len(&self) -> usize {
        self.n
    }

    fn check(&self, p: &Var<'_>) -> Result<()> {
        if p.len() != self.indices.len() {
            return Err(Error::usage(format!("expected {} surrogate weights, got {}", self.indices.len(), p.len())));
        }
        Ok(())
    }
}

impl Surrogate for RandSurrogate {
    fn name(&self) -> &'static str {
        "rand"
    }

    fn n_params(&self) -> usize {
        self.raw_log_weights.len()
    }

    fn params(&self) -> Vec<f64> {
        self.raw_log_weights.clone()
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.raw_log_weights.len() {
            return Err(Error::usage("surrogate weight count mismatch"));
        }
        self.raw_log_weights.copy_from_slice(p);
        Ok(())
    }

    fn log_lik<'t>(&self, model: &ModelDensity, z: Var<'t>, theta: Option<Var<'t>>, p: Var<'t>) -> Result<Var<'t>> {
        self.check(&p)?;
        model.log_lik(&self.view, z, theta, Some(p.exp()?))
    }

    fn grad_log_lik<'t>(
        &self,
        model: &ModelDensity,
        z: Var<'t>,
        theta: Option<Var<'t>>,
        p: Var<'t>,
    ) -> Result<Var<'t>> {
        self.check(&p)?;
        model.grad_log_lik(&self.view, z, theta, Some(p.exp()?))
    }

    fn to_json(&self) -> SurrogateJson {
        SurrogateJson::Rand {
            indices: self.indices.clone(),
            raw_log_weights: self.raw_log_weights.clone(),
        }
    }
}

/// Perturbed quadratic for linear regression: `∇_z Ψ̂_L(z) = a + δa - (B + δB) z`.
///
/// Fixed (no learnable parameters) and tied to the model's `σ_obs` at construction.
#[derive(Debug, Clone)]
pub struct QuadraticSurrogate {
    delta_a: DVector<f64>,
    delta_b: DMatrix<f64>,
    lin: Vec<f64>,
    quad: Arc<Matrix>,
    constant: f64,
}

impl QuadraticSurrogate {
    pub fn new(data: &Dataset, model: &ModelDensity, delta_a: DVector<f64>, delta_b: DMatrix<f64>) -> Result<Self> {
        if model.kind() != LikelihoodKind::Linear {
            return Err(Error::usage("the quadratic surrogate needs a linear-regression model"));
        }
        let d = model.dim();
        if delta_a.len() != d || delta_b.nrows() != d || delta_b.ncols() != d {
            return Err(Error::usage("surrogate perturbation dimensions disagree with the model"));
        }
        if (&delta_b - delta_b.transpose()).amax() > 1e-12 {
            return Err(Error::usage("delta_b must be symmetric"));
        }
        let sigma = model.sigma_obs();
        let q = likelihood_quadratic(data.x(), data.y(), sigma)?;
        let lin = (&q.a + &delta_a).iter().copied().collect();
        let b = &q.b + &delta_b;
        let quad = Matrix::new(d, d, b.transpose().iter().copied().collect())?;
        let n = data.n() as f64;
        let yy: f64 = data.y().iter().map(|v| v * v).sum();
        let constant = -0.5 * yy / (sigma * sigma) - n * sigma.ln() - 0.5 * n * crate::model::LN_2PI;
        Ok(Self {
            delta_a,
            delta_b,
            lin,
            quad: Arc::new(quad),
            constant,
        })
    }

    pub fn delta_b(&self) -> &DMatrix<f64> {
        &self.delta_b
    }

    pub fn delta_a(&self) -> &DVector<f64> {
        &self.delta_a
    }
}

impl Surrogate for QuadraticSurrogate {
    fn name(&self) -> &'static str {
        "quadratic"
    }

    fn n_params(&self) -> usize {
        0
    }

    fn params(&self) -> Vec<f64> {
        Vec::new()
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if !p.is_empty() {
            return Err(Error::usage("the quadratic surrogate has no parameters"));
        }
        Ok(())
    }

    fn log_lik<'t>(&self, _: &ModelDensity, z: Var<'t>, _: Option<Var<'t>>, _: Var<'t>) -> Result<Var<'t>> {
        let tape = z.tape();
        let lin = tape.var(self.lin.clone())?.dot(z)?;
        let quad = z.affine(&self.quad, false, None)?.dot(z)?.scale(-0.5)?;
        lin.add(quad)?.add(tape.scalar(self.constant)?)
    }

    fn grad_log_lik<'t>(&self, _: &ModelDensity, z: Var<'t>, _: Option<Var<'t>>, _: Var<'t>) -> Result<Var<'t>> {
        let bz = z.affine(&self.quad, false, None)?;
        z.tape().var(self.lin.clone())?.sub(bz)
    }

    fn to_json(&self) -> SurrogateJson {
        SurrogateJson::Quadratic {
            delta_a: self.delta_a.iter().copied().collect(),
            delta_b: rows_of(&self.delta_b),
        }
    }
}

/// Named surrogate constructors.
pub type SurrogateCtor = fn(&SurrogateArgs<'_>) -> Result<Box<dyn Surrogate>>;

/// Inputs available to a surrogate constructor.
pub struct SurrogateArgs<'a> {
    pub data: &'a Dataset,
    pub model: &'a ModelDensity,
    pub n_surr: usize,
    pub seed: u64,
    pub delta_a: Option<&'a [f64]>,
    pub delta_b: Option<&'a [Vec<f64>]>,
}

pub struct SurrogateRegistry {
    ctors: BTreeMap<&'static str, SurrogateCtor>,
}

impl Default for SurrogateRegistry {
    fn default() -> Self {
        let mut r = Self { ctors: BTreeMap::new() };
        r.register("rand", |a| {
            let mut rng = crate::rng::stream_rng(a.seed, crate::rng::Stream::Surrogate);
            Ok(Box::new(RandSurrogate::init_rand(a.data, a.n_surr, &mut rng)?))
        });
        r.register("quadratic", |a| {
            let d = a.model.dim();
            let delta_a = a.delta_a.map_or_else(|| vec![0.0; d], <[f64]>::to_vec);
            let delta_b = match a.delta_b {
                Some(rows) => {
                    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                        return Err(Error::config("delta_b must be a D×D matrix"));
                    }
                    DMatrix::from_row_iterator(d, d, rows.iter().flatten().copied())
                }
                None => DMatrix::zeros(d, d),
            };
            Ok(Box::new(QuadraticSurrogate::new(
                a.data,
                a.model,
                DVector::from_vec(delta_a),
                delta_b,
            )?))
        });
        r
    }
}

impl SurrogateRegistry {
    pub fn register(&mut self, name: &'static str, ctor: SurrogateCtor) {
        self.ctors.insert(name, ctor);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.ctors.keys().copied().collect()
    }

    pub fn build(&self, name: &str, args: &SurrogateArgs<'_>) -> Result<Box<dyn Surrogate>> {
        let ctor = self
            .ctors
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown surrogate `{name}` (known: {:?})", self.names())))?;
        ctor(args)
    }
}
