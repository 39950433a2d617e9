//! Closed-form analytics for conjugate Bayesian linear regression.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{ModelDensity, LN_2PI};

/// Largest number of minibatches [`aggregate_pseudo_posterior`] will enumerate.
pub const MAX_SUBSETS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl GaussianMoments {
    pub fn new(mean: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        if precision.nrows() != mean.len() || precision.ncols() != mean.len() {
            return Err(Error::usage("mean and precision dimensions disagree"));
        }
        if precision.clone().cholesky().is_none() {
            return Err(Error::Numeric("precision is not positive definite".into()));
        }
        Ok(Self { mean, precision })
    }

    pub fn prior_of(model: &ModelDensity) -> Self {
        Self {
            mean: DVector::from_column_slice(model.prior_mean()),
            precision: to_dmatrix(model.prior_precision()),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        self.precision
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Numeric("precision is not positive definite".into()))
    }

    pub fn log_det_precision(&self) -> Result<f64> {
        let c = self
            .precision
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("precision is not positive definite".into()))?;
        Ok(2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        let diff = DVector::from_column_slice(z) - &self.mean;
        let quad = diff.dot(&(&self.precision * &diff));
        Ok(-0.5 * quad + 0.5 * self.log_det_precision()? - 0.5 * self.dim() as f64 * LN_2PI)
    }
}

/// `∇_z Ψ_L(z) = a - B z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodQuadratic {
    pub a: DVector<f64>,
    pub b: DMatrix<f64>,
}

pub fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn check_sigma(sigma_obs: f64) -> Result<()> {
    if !(sigma_obs > 0.0 && sigma_obs.is_finite()) {
        return Err(Error::usage("sigma_obs must be positive"));
    }
    Ok(())
}

fn check_data(prior: &GaussianMoments, x: &Matrix, y: &[f64]) -> Result<()> {
    if x.rows() != y.len() || (x.rows() > 0 && x.cols() != prior.dim()) {
        return Err(Error::usage("design matrix, responses and prior dimensions disagree"));
    }
    Ok(())
}

pub fn likelihood_quadratic(x: &Matrix, y: &[f64], sigma_obs: f64) -> Result<LikelihoodQuadratic> {
    check_sigma(sigma_obs)?;
    if x.rows() != y.len() {
        return Err(Error::usage("design matrix and responses disagree"));
    }
    let xm = to_dmatrix(x);
    let s2 = sigma_obs * sigma_obs;
    Ok(LikelihoodQuadratic {
        a: xm.tr_mul(&DVector::from_column_slice(y)) / s2,
        b: xm.tr_mul(&xm) / s2,
    })
}

/// Posterior `N(μ, Λ⁻¹)` with `Λ = Λ₀ + XᵀX/σ²`, `μ = Λ⁻¹(Λ₀μ₀ + Xᵀy/σ²)`.
pub fn exact_posterior(prior: &GaussianMoments, x: &Matrix, y: &[f64], sigma_obs: f64) -> Result<GaussianMoments> {
    check_sigma(sigma_obs)?;
    check_data(prior, x, y)?;
    if y.is_empty() {
        return Ok(prior.clone());
    }
    let q = likelihood_quadratic(x, y, sigma_obs)?;
    let precision = &prior.precision + &q.b;
    let rhs = &prior.precision * &prior.mean + &q.a;
    let mean = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("posterior precision is singular".into()))?
        .solve(&rhs);
    Ok(GaussianMoments { mean, precision })
}

/// `log p(y)` via `log p(z) + log p(y|z) - log p(z|y)` at the posterior mean.
pub fn log_evidence(prior: &GaussianMoments, x: &Matrix, y: &[f64], sigma_obs: f64) -> Result<f64> {
    let post = exact_posterior(prior, x, y, sigma_obs)?;
    if y.is_empty() {
        return Ok(0.0);
    }
    let mu = post.mean.as_slice();
    let resid: f64 = (0..x.rows())
        .map(|r| (y[r] - x.row(r).iter().zip(mu).map(|(a, b)| a * b).sum::<f64>()).powi(2))
        .sum();
    let n = y.len() as f64;
    let loglik = -0.5 * resid / (sigma_obs * sigma_obs) - n * sigma_obs.ln() - 0.5 * n * LN_2PI;
    Ok(prior.log_density(mu)? + loglik - post.log_density(mu)?)
}

/// Uniform Gaussian mixture summarized by its overall moments.
#[derive(Debug, Clone)]
pub struct MixtureMoments {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub components: Vec<GaussianMoments>,
}

/// Mixture over all size-`b` minibatches `J` of `p(z | D_J) ∝ p(D_J | z)^{N/b} p(z)`.
pub fn aggregate_pseudo_posterior(
    prior: &GaussianMoments,
    x: &Matrix,
    y: &[f64],
    sigma_obs: f64,
    b: usize,
) -> Result<MixtureMoments> {
    check_sigma(sigma_obs)?;
    check_data(prior, x, y)?;
    let n = y.len();
    if b == 0 || b > n {
        return Err(Error::usage(format!("batch size {b} must lie in 1..={n}")));
    }
    let count = binomial(n, b);
    if count > MAX_SUBSETS as f64 {
        return Err(Error::usage(format!("C({n},{b}) = {count} subsets exceeds the enumeration limit")));
    }
    // likelihood^(N/B) is the same as σ² → σ²·B/N
    let sigma_b = sigma_obs * (b as f64 / n as f64).sqrt();
    let components = (0..n)
        .combinations(b)
        .map(|idx| {
            let yj: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            exact_posterior(prior, &x.select_rows(&idx), &yj, sigma_b)
        })
        .collect::<Result<Vec<_>>>()?;
    let m = components.len() as f64;
    let d = prior.dim();
    let mean = components.iter().fold(DVector::zeros(d), |acc, c| acc + &c.mean) / m;
    let mut covariance = DMatrix::zeros(d, d);
    for c in &components {
        let dev = &c.mean - &mean;
        covariance += c.covariance()? + &dev * dev.transpose();
    }
    covariance /= m;
    Ok(MixtureMoments {
        mean,
        covariance,
        components,
    })
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `Λ̃ = Λ + δB`, `μ̃ = Λ̃⁻¹(Λμ + δa)`.
pub fn surrogate_posterior(post: &GaussianMoments, delta_a: &DVector<f64>, delta_b: &DMatrix<f64>) -> Result<GaussianMoments> {
    let precision = &post.precision + delta_b;
    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("perturbed precision is not positive definite".into()))?;
    let mean = chol.solve(&(&post.precision * &post.mean + delta_a));
    Ok(GaussianMoments { mean, precision })
}

/// `|Tr(Λ⁻¹ δB)|`.
pub fn surrogate_trace_term(post: &GaussianMoments, delta_b: &DMatrix<f64>) -> Result<f64> {
    Ok((post.covariance()? * delta_b).trace().abs())
}

/// `KL(N(m, S) || p)`.
pub fn kl_to(mean: &DVector<f64>, cov: &DMatrix<f64>, p: &GaussianMoments) -> Result<f64> {
    let d = p.dim() as f64;
    let s_chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("covariance is not positive definite".into()))?;
    let log_det_s = 2.0 * s_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let diff = &p.mean - mean;
    let trace = (&p.precision * cov).trace();
    Ok(0.5 * (trace + diff.dot(&(&p.precision * &diff)) - d - log_det_s - p.log_det_precision()?))
}

/// Everything the `oracle` subcommand reports.
#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub n: usize,
    pub d: usize,
    pub sigma_obs: f64,
    pub log_evidence: f64,
    pub posterior_mean: Vec<f64>,
    pub posterior_precision: Vec<Vec<f64>>,
    pub posterior_covariance: Vec<Vec<f64>>,
    pub a: Vec<f64>,
    pub b: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<AggregateReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateReport {
    pub batch_size: usize,
    pub subsets: usize,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

pub fn report(
    prior: &GaussianMoments,
    x: &Matrix,
    y: &[f64],
    sigma_obs: f64,
    batch_size: Option<usize>,
) -> Result<OracleReport> {
    let post = exact_posterior(prior, x, y, sigma_obs)?;
    let q = likelihood_quadratic(x, y, sigma_obs)?;
    let aggregate = match batch_size {
        Some(b) => {
            let mix = aggregate_pseudo_posterior(prior, x, y, sigma_obs, b)?;
            Some(AggregateReport {
                batch_size: b,
                subsets: mix.components.len(),
                mean: mix.mean.iter().copied().collect(),
                covariance: rows_of(&mix.covariance),
            })
        }
        None => None,
    };
    Ok(OracleReport {
        n: y.len(),
        d: prior.dim(),
        sigma_obs,
        log_evidence: log_evidence(prior, x, y, sigma_obs)?,
        posterior_mean: post.mean.iter().copied().collect(),
        posterior_precision: rows_of(&post.precision),
        posterior_covariance: rows_of(&post.covariance()?),
        a: q.a.iter().copied().collect(),
        b: rows_of(&q.b),
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::model::{Dataset, LikelihoodKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn std_prior(d: usize) -> GaussianMoments {
        GaussianMoments::new(DVector::zeros(d), DMatrix::identity(d, d)).unwrap()
    }

    fn col(v: &[f64]) -> Matrix {
        Matrix::new(v.len(), 1, v.to_vec()).unwrap()
    }

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (GaussianMoments, Matrix, Vec<f64>) {
        let x = Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
        let y = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.5..0.5));
        let prec = &a * a.transpose() + DMatrix::identity(d, d);
        let mean = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        (GaussianMoments::new(mean, prec).unwrap(), x, y)
    }

    /// `log N(y | Xμ₀, σ²I + XΛ₀⁻¹Xᵀ)` in N dimensions.
    fn log_evidence_n_dim(prior: &GaussianMoments, x: &Matrix, y: &[f64], sigma: f64) -> f64 {
        let xm = to_dmatrix(x);
        let n = y.len();
        let cov = &xm * prior.covariance().unwrap() * xm.transpose() + DMatrix::identity(n, n) * sigma * sigma;
        let marg = GaussianMoments::new(&xm * &prior.mean, cov.try_inverse().unwrap()).unwrap();
        marg.log_density(y).unwrap()
    }

    #[test]
    fn exact_posterior_examples() {
        let p = exact_posterior(&std_prior(1), &col(&[1.0]), &[0.0], 1.0).unwrap();
        assert!((p.precision[(0, 0)] - 2.0).abs() < 1e-15 && p.mean[0].abs() < 1e-15);
        let p = exact_posterior(&std_prior(1), &col(&[1.0, 1.0]), &[1.0, 1.0], 1.0).unwrap();
        assert!((p.precision[(0, 0)] - 3.0).abs() < 1e-15);
        assert!((p.mean[0] - 2.0 / 3.0).abs() < 1e-15);
        let prior = std_prior(2);
        assert_eq!(exact_posterior(&prior, &Matrix::zeros(0, 2), &[], 1.0).unwrap(), prior);
    }

    #[test]
    fn log_evidence_examples() {
        let v = log_evidence(&std_prior(1), &col(&[1.0]), &[0.0], 1.0).unwrap();
        assert!((v + 0.5 * (4.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((v + 1.265_512_123_484_645).abs() < 1e-6);
        assert_eq!(log_evidence(&std_prior(3), &Matrix::zeros(0, 3), &[], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn log_evidence_agrees_with_the_marginal_and_bayes_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let (prior, x, y) = random_problem(&mut rng, 12, 3);
            let sigma = rng.random_range(0.3..2.0);
            let le = log_evidence(&prior, &x, &y, sigma).unwrap();
            assert!((le - log_evidence_n_dim(&prior, &x, &y, sigma)).abs() < 1e-10);
            let post = exact_posterior(&prior, &x, &y, sigma).unwrap();
            let data = Dataset::from_parts(x.clone(), y.clone()).unwrap();
            let model = ModelDensity::new(
                LikelihoodKind::Linear,
                prior.mean.iter().copied().collect(),
                Matrix::new(3, 3, prior.precision.transpose().iter().copied().collect()).unwrap(),
                sigma,
            )
            .unwrap();
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let tape = Tape::new();
            let zv = tape.var(z.clone()).unwrap();
            let joint = model.log_prior(zv).unwrap().add(model.log_lik(&data.full_view(), zv, None, None).unwrap()).unwrap();
            let bayes = joint.scalar() - post.log_density(&z).unwrap();
            assert!((le - bayes).abs() < 1e-10, "{le} vs {bayes}");
        }
    }

    #[test]
    fn data_only_adds_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (prior, x, y) = random_problem(&mut rng, 5, 3);
        let post = exact_posterior(&prior, &x, &y, 0.7).unwrap();
        let diff = &post.precision - &prior.precision;
        assert!(diff.symmetric_eigenvalues().iter().all(|e| *e >= -1e-12));
    }

    #[test]
    fn aggregate_examples() {
        let prior = std_prior(1);
        let x = col(&[1.0, 1.0]);
        let mix = aggregate_pseudo_posterior(&prior, &x, &[2.0, -2.0], 1.0, 1).unwrap();
        assert!(mix.mean[0].abs() < 1e-15);
        assert!((mix.covariance[(0, 0)] - 19.0 / 9.0).abs() < 1e-12);
        assert_eq!(mix.components.len(), 2);
        assert!((mix.components[0].mean[0].abs() - 4.0 / 3.0).abs() < 1e-12);

        let x = col(&[1.0, 0.5, 1.0, 0.5]);
        let mix = aggregate_pseudo_posterior(&prior, &x, &[1.0, 3.0, -1.0, -3.0], 0.8, 2).unwrap();
        assert!(mix.mean[0].abs() < 1e-12);
    }

    #[test]
    fn aggregate_with_full_batch_is_the_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (prior, x, y) = random_problem(&mut rng, 6, 2);
        let post = exact_posterior(&prior, &x, &y, 1.1).unwrap();
        let mix = aggregate_pseudo_posterior(&prior, &x, &y, 1.1, 6).unwrap();
        assert!((mix.mean - &post.mean).amax() < 1e-12);
        assert!((mix.covariance - post.covariance().unwrap()).amax() < 1e-12);
    }

    #[test]
    fn aggregate_enumeration_guard() {
        let n = 40;
        let x = Matrix::new(n, 1, vec![1.0; n]).unwrap();
        let r = aggregate_pseudo_posterior(&std_prior(1), &x, &vec![0.0; n], 1.0, 20);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn surrogate_posterior_examples() {
        let post = GaussianMoments::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 2.0)).unwrap();
        let same = surrogate_posterior(&post, &DVector::zeros(1), &DMatrix::zeros(1, 1)).unwrap();
        assert_eq!(same.precision, post.precision);
        assert!((same.mean[0] - 1.0).abs() < 1e-15);
        let s = surrogate_posterior(&post, &DVector::zeros(1), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!((s.precision[(0, 0)] - 3.0).abs() < 1e-15 && (s.mean[0] - 2.0 / 3.0).abs() < 1e-15);
        let bad = surrogate_posterior(&post, &DVector::zeros(1), &DMatrix::from_element(1, 1, -3.0));
        assert!(matches!(bad, Err(Error::Numeric(_))));
    }

    #[test]
    fn surrogate_posterior_first_order_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (prior, x, y) = random_problem(&mut rng, 10, 3);
        let post = exact_posterior(&prior, &x, &y, 0.9).unwrap();
        let cov = post.covariance().unwrap();
        let da0 = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let m = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let db0 = &m + m.transpose();
        let mut errs = Vec::new();
        for h in [1e-3, 1e-4] {
            let (da, db) = (&da0 * h, &db0 * h);
            let exact = surrogate_posterior(&post, &da, &db).unwrap().mean;
            let first = &post.mean + &cov * &da - &cov * &db * &post.mean;
            errs.push((exact - first).amax());
        }
        // second-order remainder: shrinking δ tenfold shrinks the error a hundredfold
        assert!(errs[1] < 2e-2 * errs[0] && errs[1] < 1e-7, "{errs:?}");
    }

    #[test]
    fn trace_term_examples() {
        let post = GaussianMoments::new(DVector::zeros(1), DMatrix::from_element(1, 1, 2.0)).unwrap();
        assert_eq!(surrogate_trace_term(&post, &DMatrix::zeros(1, 1)).unwrap(), 0.0);
        assert!((surrogate_trace_term(&post, &DMatrix::from_element(1, 1, 1.0)).unwrap() - 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (prior, x, y) = random_problem(&mut rng, 7, 3);
        let post = exact_posterior(&prior, &x, &y, 1.0).unwrap();
        let t = surrogate_trace_term(&post, &(&post.precision * -0.3)).unwrap();
        assert!((t - 0.9).abs() < 1e-12);
    }

    #[test]
    fn likelihood_quadratic_examples() {
        let q = likelihood_quadratic(&Matrix::identity(2), &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(q.a, DVector::zeros(2));
        let q = likelihood_quadratic(&Matrix::identity(3), &[1.0, -2.0, 0.5], 1.0).unwrap();
        assert_eq!(q.b, DMatrix::identity(3, 3));
        assert_eq!(q.a.as_slice(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn likelihood_quadratic_matches_autodiff_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (_, x, y) = random_problem(&mut rng, 9, 3);
        let sigma = 0.6;
        let q = likelihood_quadratic(&x, &y, sigma).unwrap();
        let data = Dataset::from_parts(x, y).unwrap();
        let model = ModelDensity::standard(LikelihoodKind::Linear, 3, sigma).unwrap();
        for _ in 0..5 {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let tape = Tape::new();
            let zv = tape.var(z.clone()).unwrap();
            let ll = model.log_lik(&data.full_view(), zv, None, None).unwrap();
            let g = tape.gradient(ll, &[zv]).unwrap().remove(0);
            let expect = &q.a - &q.b * DVector::from_column_slice(&z);
            for (a, b) in g.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn reweighted_data_two_routes_one_answer() {
        // surrogate posterior from the quadratic of a weighted point set equals the exact posterior
        // of the dataset with the likelihood terms reweighted
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (prior, x, y) = random_problem(&mut rng, 8, 2);
        let sigma = 0.8;
        let w: Vec<f64> = (0..8).map(|_| rng.random_range(0.2..3.0)).collect();
        let post = exact_posterior(&prior, &x, &y, sigma).unwrap();
        let full = likelihood_quadratic(&x, &y, sigma).unwrap();
        // row scaling by √w reweights each likelihood term by w
        let mut xw = x.clone();
        let mut yw = y.clone();
        for r in 0..8 {
            let s = w[r].sqrt();
            for c in 0..2 {
                xw.set(r, c, x.get(r, c) * s);
            }
            yw[r] *= s;
        }
        let weighted = likelihood_quadratic(&xw, &yw, sigma).unwrap();
        let route1 = surrogate_posterior(&post, &(&weighted.a - &full.a), &(&weighted.b - &full.b)).unwrap();
        let route2 = exact_posterior(&prior, &xw, &yw, sigma).unwrap();
        assert!((route1.mean - route2.mean).amax() < 1e-10);
        assert!((route1.precision - route2.precision).amax() < 1e-10);
    }

    #[test]
    fn kl_is_zero_at_the_target_and_positive_elsewhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (prior, x, y) = random_problem(&mut rng, 6, 2);
        let post = exact_posterior(&prior, &x, &y, 1.0).unwrap();
        let cov = post.covariance().unwrap();
        assert!(kl_to(&post.mean, &cov, &post).unwrap().abs() < 1e-12);
        assert!(kl_to(&(&post.mean * 1.1), &(&cov * 0.9), &post).unwrap() > 0.0);
    }

    #[test]
    fn report_serializes() {
        let r = report(&std_prior(1), &col(&[1.0, 1.0]), &[2.0, -2.0], 1.0, Some(1)).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["aggregate"]["subsets"], 2);
        assert!((json["log_evidence"].as_f64().unwrap() - r.log_evidence).abs() == 0.0);
    }
}
