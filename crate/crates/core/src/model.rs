//! Global-latent-variable models with factorized likelihoods.
//!
//! The log joint splits into a Gaussian log prior and a sum of per-datum log likelihood
//! terms. Both are recorded on the tape, and so are their `z`-gradients, which lets the
//! annealed estimators differentiate through the leapfrog dynamics with first-order AD.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LikelihoodKind {
    Linear,
    Logistic,
}

/// Covariates `X` (N×d) and responses `y`.
#[derive(Debug, Clone)]
pub struct Dataset {
    x: Arc<Matrix>,
    y: Arc<Vec<f64>>,
    names: Vec<String>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<f64>, names: Vec<String>) -> Result<Self> {
        if x.rows() == 0 || x.cols() == 0 {
            return Err(Error::usage("dataset needs at least one row and one covariate"));
        }
        if y.len() != x.rows() {
            return Err(Error::usage(format!("{} responses for {} rows", y.len(), x.rows())));
        }
        if names.len() != x.cols() {
            return Err(Error::usage("one covariate name per column required"));
        }
        if x.data().iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::usage("dataset contains non-finite entries"));
        }
        Ok(Self {
            x: Arc::new(x),
            y: Arc::new(y),
            names,
        })
    }

    /// Unnamed columns `x1..xd`.
    pub fn from_parts(x: Matrix, y: Vec<f64>) -> Result<Self> {
        let names = (1..=x.cols()).map(|i| format!("x{i}")).collect();
        Self::new(x, y, names)
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_binary(&self) -> bool {
        self.y.iter().all(|v| *v == 0.0 || *v == 1.0)
    }

    /// Z-scores every covariate column. Constant columns are only centred.
    pub fn standardized(&self) -> Self {
        let (n, d) = (self.n(), self.d());
        let mut x = (*self.x).clone();
        for c in 0..d {
            let mean = (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64;
            let var = (0..n).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            for r in 0..n {
                x.set(r, c, (x.get(r, c) - mean) / sd);
            }
        }
        Self {
            x: Arc::new(x),
            y: Arc::clone(&self.y),
            names: self.names.clone(),
        }
    }

    /// The rows `idx` as a standalone view. Indices must be in range and distinct.
    pub fn view(&self, idx: &[usize]) -> Result<DataView> {
        let mut seen = vec![false; self.n()];
        for &i in idx {
            if i >= self.n() {
                return Err(Error::usage(format!("index {i} out of range for N={}", self.n())));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::usage(format!("duplicate index {i}")));
            }
        }
        Ok(DataView {
            x: Arc::new(self.x.select_rows(idx)),
            y: Arc::new(idx.iter().map(|&i| self.y[i]).collect()),
        })
    }

    pub fn full_view(&self) -> DataView {
        DataView {
            x: Arc::clone(&self.x),
            y: Arc::clone(&self.y),
        }
    }
}

/// A set of rows ready to be fed to the likelihood.
#[derive(Debug, Clone)]
pub struct DataView {
    pub(crate) x: Arc<Matrix>,
    pub(crate) y: Arc<Vec<f64>>,
}

impl DataView {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Gaussian prior `N(μ₀, Λ₀⁻¹)` plus a linear-Gaussian or logistic likelihood.
#[derive(Debug, Clone)]
pub struct ModelDensity {
    kind: LikelihoodKind,
    prior_mean: Vec<f64>,
    prior_precision: Arc<Matrix>,
    prior_log_det: f64,
    sigma_obs: f64,
}

impl ModelDensity {
    pub fn new(kind: LikelihoodKind, prior_mean: Vec<f64>, prior_precision: Matrix, sigma_obs: f64) -> Result<Self> {
        let d = prior_mean.len();
        if d == 0 || prior_precision.rows() != d || prior_precision.cols() != d {
            return Err(Error::usage("prior mean and precision dimensions disagree"));
        }
        if !prior_precision.is_symmetric(1e-12) {
            return Err(Error::usage("prior precision must be symmetric"));
        }
        if !(sigma_obs > 0.0 && sigma_obs.is_finite()) {
            return Err(Error::usage("sigma_obs must be positive"));
        }
        let chol = DMatrix::from_row_slice(d, d, prior_precision.data())
            .cholesky()
            .ok_or_else(|| Error::usage("prior precision must be positive definite"))?;
        let prior_log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            kind,
            prior_mean,
            prior_precision: Arc::new(prior_precision),
            prior_log_det,
            sigma_obs,
        })
    }

    /// Standard normal prior in `d` dimensions.
    pub fn standard(kind: LikelihoodKind, d: usize, sigma_obs: f64) -> Result<Self> {
        Self::new(kind, vec![0.0; d], Matrix::identity(d), sigma_obs)
    }

    pub fn kind(&self) -> LikelihoodKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.prior_mean.len()
    }

    pub fn prior_mean(&self) -> &[f64] {
        &self.prior_mean
    }

    pub fn prior_precision(&self) -> &Matrix {
        &self.prior_precision
    }

    pub fn sigma_obs(&self) -> f64 {
        self.sigma_obs
    }

    /// Unconstrained model parameters θ: `[log σ_obs]` for linear regression, empty otherwise.
    pub fn theta_init(&self) -> Vec<f64> {
        match self.kind {
            LikelihoodKind::Linear => vec![self.sigma_obs.ln()],
            LikelihoodKind::Logistic => vec![],
        }
    }

    /// Checks that `data` is admissible for this model.
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if data.d() != self.dim() {
            return Err(Error::usage(format!(
                "dataset has {} covariates, model dimension is {}",
                data.d(),
                self.dim()
            )));
        }
        if self.kind == LikelihoodKind::Logistic && !data.is_binary() {
            return Err(Error::usage("logistic regression needs responses in {0, 1}"));
        }
        Ok(())
    }

    fn check_dim(&self, z: &Var<'_>) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::usage(format!("z has length {}, expected {}", z.len(), self.dim())));
        }
        Ok(())
    }

    /// `log N(z | μ₀, Λ₀⁻¹)`.
    pub fn log_prior<'t>(&self, z: Var<'t>) -> Result<Var<'t>> {
        self.check_dim(&z)?;
        let tape = z.tape();
        let diff = z.sub(tape.var(self.prior_mean.clone())?)?;
        let quad = diff.affine(&self.prior_precision, false, None)?.dot(diff)?;
        let c = tape.scalar(0.5 * self.prior_log_det - 0.5 * self.dim() as f64 * LN_2PI)?;
        quad.scale(-0.5)?.add(c)
    }

    /// `∇_z log N(z | μ₀, Λ₀⁻¹) = -Λ₀ (z - μ₀)`.
    pub fn grad_log_prior<'t>(&self, z: Var<'t>) -> Result<Var<'t>> {
        self.check_dim(&z)?;
        let diff = z.sub(z.tape().var(self.prior_mean.clone())?)?;
        diff.affine(&self.prior_precision, false, None)?.neg()
    }

    fn log_sigma<'t>(&self, tape: &'t Tape, theta: Option<Var<'t>>) -> Result<Var<'t>> {
        match theta {
            Some(t) => t.index(0),
            None => tape.scalar(self.sigma_obs.ln()),
        }
    }

    /// Per-datum log likelihoods over the rows of `view`.
    pub fn log_lik_terms<'t>(&self, view: &DataView, z: Var<'t>, theta: Option<Var<'t>>) -> Result<Var<'t>> {
        self.check_dim(&z)?;
        let tape = z.tape();
        let s = z.affine(&view.x, false, None)?;
        let y = tape.var(view.y.to_vec())?;
        match self.kind {
            LikelihoodKind::Linear => {
                let log_sigma = self.log_sigma(tape, theta)?;
                let half_prec = log_sigma.scale(-2.0)?.exp()?.scale(-0.5)?;
                let norm = log_sigma.add(tape.scalar(0.5 * LN_2PI)?)?.neg()?;
                y.sub(s)?.square()?.mul(half_prec)?.add(norm)
            }
            LikelihoodKind::Logistic => {
                let pos = s.log_sigmoid()?;
                let neg = s.neg()?.log_sigmoid()?;
                let one_minus_y = tape.var(view.y.iter().map(|v| 1.0 - v).collect())?;
                y.mul(pos)?.add(one_minus_y.mul(neg)?)
            }
        }
    }

    /// `Σ_n w_n log p(y_n | z, x_n)` over the rows of `view` (`w ≡ 1` when `weights` is `None`).
    pub fn log_lik<'t>(
        &self,
        view: &DataView,
        z: Var<'t>,
        theta: Option<Var<'t>>,
        weights: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        if view.is_empty() {
            return z.tape().scalar(0.0);
        }
        let terms = self.log_lik_terms(view, z, theta)?;
        match weights {
            Some(w) => terms.dot(w),
            None => terms.sum(),
        }
    }

    /// `∇_z Σ_n w_n log p(y_n | z, x_n)`, itself differentiable in `z`, θ and `w`.
    pub fn grad_log_lik<'t>(
        &self,
        view: &DataView,
        z: Var<'t>,
        theta: Option<Var<'t>>,
        weights: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        self.check_dim(&z)?;
        let tape = z.tape();
        if view.is_empty() {
            return tape.var(vec![0.0; self.dim()]);
        }
        let s = z.affine(&view.x, false, None)?;
        let y = tape.var(view.y.to_vec())?;
        let resid = match self.kind {
            LikelihoodKind::Linear => y.sub(s)?,
            LikelihoodKind::Logistic => y.sub(s.sigmoid()?)?,
        };
        let resid = match weights {
            Some(w) => w.mul(resid)?,
            None => resid,
        };
        let g = resid.affine(&view.x, true, None)?;
        match self.kind {
            LikelihoodKind::Linear => {
                let prec = self.log_sigma(tape, theta)?.scale(-2.0)?.exp()?;
                g.mul(prec)
            }
            LikelihoodKind::Logistic => Ok(g),
        }
    }

    /// `Ψ_L` over the index set `idx` (a convenience over [`Dataset::view`]).
    pub fn log_lik_subset<'t>(&self, data: &Dataset, z: Var<'t>, idx: &[usize], theta: Option<Var<'t>>) -> Result<Var<'t>> {
        let view = data.view(idx)?;
        self.log_lik(&view, z, theta, None)
    }

    /// Plain-`f64` log prior, used by oracles and diagnostics.
    pub fn log_prior_value(&self, z: &[f64]) -> f64 {
        let d = self.dim();
        let diff = DVector::from_iterator(d, z.iter().zip(&self.prior_mean).map(|(a, b)| a - b));
        let prec = DMatrix::from_row_slice(d, d, self.prior_precision.data());
        -0.5 * diff.dot(&(prec * &diff)) + 0.5 * self.prior_log_det - 0.5 * d as f64 * LN_2PI
    }
}

/// `log N(x | mean, diag(var))` for plain slices.
pub fn log_normal_diag(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * ((x - m).powi(2) / v + v.ln() + (2.0 * PI).ln()))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradient;
    use itertools::Itertools;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, d: usize, binary: bool) -> Dataset {
        let x = Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let y = (0..n)
            .map(|_| {
                if binary {
                    f64::from(rng.random_bool(0.5))
                } else {
                    rng.random_range(-3.0..3.0)
                }
            })
            .collect();
        Dataset::from_parts(x, y).unwrap()
    }

    fn eval(f: impl for<'t> Fn(&'t Tape) -> Result<Var<'t>>) -> f64 {
        let tape = Tape::new();
        f(&tape).unwrap().scalar()
    }

    #[test]
    fn log_prior_examples() {
        let m = ModelDensity::standard(LikelihoodKind::Linear, 1, 1.0).unwrap();
        let v = eval(|t| m.log_prior(t.var(vec![0.0])?));
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12);

        let m2 = ModelDensity::standard(LikelihoodKind::Linear, 2, 1.0).unwrap();
        let v = eval(|t| m2.log_prior(t.var(vec![1.0, 0.0])?));
        assert!((v - (-(2.0 * PI).ln() - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn log_prior_is_maximal_at_the_mean() {
        let prec = Matrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap();
        let m = ModelDensity::new(LikelihoodKind::Linear, vec![0.5, -1.0], prec, 1.0).unwrap();
        let tape = Tape::new();
        let z = tape.var(vec![0.5, -1.0]).unwrap();
        let lp = m.log_prior(z).unwrap();
        let g = tape.gradient(lp, &[z]).unwrap();
        assert!(g[0].iter().all(|v| v.abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let other: Vec<f64> = vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            assert!(m.log_prior_value(&other) <= lp.scalar());
        }
        assert!((m.log_prior_value(&[0.5, -1.0]) - lp.scalar()).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_a_usage_error() {
        let m = ModelDensity::standard(LikelihoodKind::Linear, 2, 1.0).unwrap();
        let tape = Tape::new();
        assert!(matches!(m.log_prior(tape.var(vec![0.0]).unwrap()), Err(Error::Usage(_))));
    }

    #[test]
    fn log_lik_subset_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = random_dataset(&mut rng, 6, 3, true);
        let logistic = ModelDensity::standard(LikelihoodKind::Logistic, 3, 1.0).unwrap();
        let v = eval(|t| logistic.log_lik_subset(&data, t.var(vec![0.0; 3])?, &[0, 2, 5], None));
        assert!((v + 3.0 * 2f64.ln()).abs() < 1e-12);

        // zero residuals
        let z = [0.5, -1.0];
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![3.0, 1.0]]).unwrap();
        let y = x.matvec(&z);
        let data = Dataset::from_parts(x, y).unwrap();
        let linear = ModelDensity::standard(LikelihoodKind::Linear, 2, 1.0).unwrap();
        let v = eval(|t| linear.log_lik_subset(&data, t.var(z.to_vec())?, &[0, 1, 2], None));
        assert!((v + 3.0 * 0.5 * LN_2PI).abs() < 1e-12);

        let data = Dataset::from_parts(Matrix::new(1, 1, vec![1.0]).unwrap(), vec![2.0]).unwrap();
        let linear = ModelDensity::standard(LikelihoodKind::Linear, 1, 1.0).unwrap();
        let v = eval(|t| linear.log_lik_subset(&data, t.var(vec![0.0])?, &[0], None));
        assert!((v - (-0.5 * LN_2PI - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn empty_index_set_gives_zero_and_bad_indices_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = random_dataset(&mut rng, 4, 2, false);
        let m = ModelDensity::standard(LikelihoodKind::Linear, 2, 1.0).unwrap();
        assert_eq!(eval(|t| m.log_lik_subset(&data, t.var(vec![1.0, 1.0])?, &[], None)), 0.0);
        let tape = Tape::new();
        let z = tape.var(vec![0.0, 0.0]).unwrap();
        assert!(matches!(m.log_lik_subset(&data, z, &[4], None), Err(Error::Usage(_))));
        assert!(matches!(m.log_lik_subset(&data, z, &[1, 1], None), Err(Error::Usage(_))));
    }

    #[test]
    fn log_lik_is_additive_over_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in [LikelihoodKind::Linear, LikelihoodKind::Logistic] {
            let data = random_dataset(&mut rng, 9, 2, kind == LikelihoodKind::Logistic);
            let m = ModelDensity::standard(kind, 2, 0.7).unwrap();
            let z = vec![0.3, -1.2];
            let all: Vec<usize> = (0..9).collect();
            let full = eval(|t| m.log_lik_subset(&data, t.var(z.clone())?, &all, None));
            let parts = [vec![0, 4, 8], vec![1, 2], vec![3, 5, 6, 7]];
            let sum: f64 = parts
                .iter()
                .map(|p| eval(|t| m.log_lik_subset(&data, t.var(z.clone())?, p, None)))
                .sum();
            assert!((full - sum).abs() < 1e-12, "{kind:?}: {full} vs {sum}");
        }
    }

    #[test]
    fn scaled_minibatch_estimate_is_unbiased_over_all_subsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, b) = (7, 3);
        let data = random_dataset(&mut rng, n, 2, false);
        let m = ModelDensity::standard(LikelihoodKind::Linear, 2, 1.3).unwrap();
        let z = vec![0.4, 0.9];
        let all: Vec<usize> = (0..n).collect();
        let full = eval(|t| m.log_lik_subset(&data, t.var(z.clone())?, &all, None));
        let subsets: Vec<Vec<usize>> = (0..n).combinations(b).collect();
        let mean = subsets
            .iter()
            .map(|s| n as f64 / b as f64 * eval(|t| m.log_lik_subset(&data, t.var(z.clone())?, s, None)))
            .sum::<f64>()
            / subsets.len() as f64;
        assert!((mean - full).abs() < 1e-10 * full.abs().max(1.0));
    }

    #[test]
    fn gradients_pass_finite_difference_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for kind in [LikelihoodKind::Linear, LikelihoodKind::Logistic] {
            let data = random_dataset(&mut rng, 8, 2, kind == LikelihoodKind::Logistic);
            let prec = Matrix::from_rows(&[vec![1.5, 0.2], vec![0.2, 0.8]]).unwrap();
            let m = ModelDensity::new(kind, vec![0.1, -0.3], prec, 0.9).unwrap();
            let view = data.full_view();
            // z and θ jointly
            let x0 = vec![0.4, -0.7, 0.9f64.ln()];
            let r = check_gradient(
                |_, v| {
                    let z = v.slice(0, 2)?;
                    let theta = v.slice(2, 1)?;
                    m.log_prior(z)?.add(m.log_lik(&view, z, Some(theta), None)?)
                },
                &x0,
                1e-6,
            );
            assert!(r.max_rel_error <= 1e-5, "{kind:?}: {r:?}");
        }
    }

    #[test]
    fn closed_form_z_gradients_match_reverse_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for kind in [LikelihoodKind::Linear, LikelihoodKind::Logistic] {
            let data = random_dataset(&mut rng, 10, 3, kind == LikelihoodKind::Logistic);
            let m = ModelDensity::standard(kind, 3, 1.7).unwrap();
            let view = data.full_view();
            let tape = Tape::new();
            let z = tape.var(vec![0.2, -0.5, 1.1]).unwrap();
            let w = tape.var((0..10).map(|_| rng.random_range(0.1..3.0)).collect()).unwrap();
            let ll = m.log_lik(&view, z, None, Some(w)).unwrap().add(m.log_prior(z).unwrap()).unwrap();
            let g_ad = tape.gradient(ll, &[z]).unwrap().remove(0);
            let g_cf = m
                .grad_log_lik(&view, z, None, Some(w))
                .unwrap()
                .add(m.grad_log_prior(z).unwrap())
                .unwrap()
                .value();
            for (a, b) in g_ad.iter().zip(&g_cf) {
                assert!((a - b).abs() < 1e-10, "{kind:?}: {g_ad:?} vs {g_cf:?}");
            }
        }
    }

    #[test]
    fn logistic_requires_binary_responses() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = random_dataset(&mut rng, 5, 2, false);
        let m = ModelDensity::standard(LikelihoodKind::Logistic, 2, 1.0).unwrap();
        assert!(m.validate(&data).is_err());
    }

    #[test]
    fn invalid_models_are_rejected() {
        assert!(ModelDensity::standard(LikelihoodKind::Linear, 2, 0.0).is_err());
        let not_pd = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(ModelDensity::new(LikelihoodKind::Linear, vec![0.0, 0.0], not_pd, 1.0).is_err());
        let x = Matrix::new(1, 1, vec![f64::NAN]).unwrap();
        assert!(Dataset::from_parts(x, vec![1.0]).is_err());
    }

    #[test]
    fn large_logits_stay_finite() {
        let data = Dataset::from_parts(Matrix::new(2, 1, vec![1.0, -1.0]).unwrap(), vec![0.0, 1.0]).unwrap();
        let m = ModelDensity::standard(LikelihoodKind::Logistic, 1, 1.0).unwrap();
        let v = eval(|t| m.log_lik(&data.full_view(), t.var(vec![50.0])?, None, None));
        assert!((v + 100.0).abs() < 1e-9);
    }

    #[test]
    fn standardize_centres_and_scales() {
        let x = Matrix::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0], vec![5.0, 5.0]]).unwrap();
        let d = Dataset::from_parts(x, vec![0.0; 3]).unwrap().standardized();
        let col0: Vec<f64> = (0..3).map(|r| d.x().get(r, 0)).collect();
        assert!((col0.iter().sum::<f64>()).abs() < 1e-12);
        assert!((col0.iter().map(|v| v * v).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        assert!((0..3).all(|r| d.x().get(r, 1) == 0.0));
    }
}
