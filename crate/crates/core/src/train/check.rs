//! Invariant suite behind the `check` subcommand.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::anneal::AnnealingState;
use crate::autodiff::check_gradient;
use crate::dais::{
    kinetic_diff, leapfrog, refresh, refresh_log_density, value_only, Dais, ElboEstimator, EstimatorInputs, NoiseBundle,
    NsDais, Parametric, SlDais, Variational,
};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::model::{Dataset, LikelihoodKind, ModelDensity};
use crate::oracle::{exact_posterior, log_evidence, GaussianMoments};
use crate::rng::{sample_minibatch, stream_rng, Stream};
use crate::surrogate::{RandSurrogate, Surrogate};
use crate::vardist::BaseDistribution;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Random conjugate regression problem with inputs and responses on a unit scale.
pub fn conjugate_problem(n: usize, d: usize, seed: u64) -> (ModelDensity, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape");
    let y = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    let model = ModelDensity::standard(LikelihoodKind::Linear, d, 1.0).expect("standard prior");
    (model, Dataset::from_parts(x, y).expect("finite data"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub max_reversibility_error: f64,
    pub max_det_error: f64,
}

/// Reversibility and unit Jacobian of the leapfrog map on random quadratic potentials.
pub fn leapfrog_geometry(instances: usize, seed: u64) -> Result<Geometry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Geometry {
        max_reversibility_error: 0.0,
        max_det_error: 0.0,
    };
    for _ in 0..instances {
        let d = rng.random_range(1..5);
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let prec = &a * a.transpose() + DMatrix::identity(d, d);
        let grad = |z: &[f64]| -> Vec<f64> { (&prec * DVector::from_column_slice(z)).iter().map(|v| -v).collect() };
        let m: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..4.0)).collect();
        let eta = rng.random_range(0.0..=0.25);
        let (z, v) = (gaussian(&mut rng, d), gaussian(&mut rng, d));
        let (z1, v1) = leapfrog(&z, &v, eta, &m, grad)?;
        let neg: Vec<f64> = v1.iter().map(|x| -x).collect();
        let (z2, v2) = leapfrog(&z1, &neg, eta, &m, grad)?;
        for i in 0..d {
            out.max_reversibility_error = out
                .max_reversibility_error
                .max((z2[i] - z[i]).abs())
                .max((v2[i] + v[i]).abs());
        }
        let h = 1e-5;
        let state: Vec<f64> = z.iter().chain(&v).copied().collect();
        let map = |s: &[f64]| -> Result<Vec<f64>> {
            let (a, b) = leapfrog(&s[..d], &s[d..], eta, &m, grad)?;
            Ok(a.into_iter().chain(b).collect())
        };
        let mut jac = DMatrix::zeros(2 * d, 2 * d);
        for c in 0..2 * d {
            let (mut p, mut q) = (state.clone(), state.clone());
            p[c] += h;
            q[c] -= h;
            let (fp, fq) = (map(&p)?, map(&q)?);
            for r in 0..2 * d {
                jac[(r, c)] = (fp[r] - fq[r]) / (2.0 * h);
            }
        }
        out.max_det_error = out.max_det_error.max((jac.determinant() - 1.0).abs());
    }
    Ok(out)
}

/// Largest deviation between the refresh density ratio and the kinetic-energy difference.
pub fn refresh_ratio_error(transitions: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..transitions {
        let d = rng.random_range(1..6);
        let m: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..5.0)).collect();
        let gamma = rng.random_range(0.0..0.999);
        let vh: Vec<f64> = gaussian(&mut rng, d).iter().zip(&m).map(|(e, m)| e * m.sqrt()).collect();
        let v = refresh(&vh, gamma, &m, &gaussian(&mut rng, d));
        let fwd = refresh_log_density(&v, &vh, gamma, &m)?;
        let bwd = refresh_log_density(&vh, &v, gamma, &m)?;
        worst = worst.max((fwd - bwd - kinetic_diff(&v, &vh, &m)).abs());
    }
    Ok(worst)
}

fn annealed(k: usize, d: usize, q0: BaseDistribution) -> Variational {
    let mut a = AnnealingState::new(k, d);
    a.raw_eta = 0.12;
    a.raw_kappa = 0.06;
    a.raw_beta = (0..k).map(|i| 0.3 * i as f64 - 0.2).collect();
    a.raw_mass = (0..d).map(|i| 0.1 - 0.25 * i as f64).collect();
    Variational {
        q0,
        anneal: Some(a),
        surrogate: None,
        theta: None,
    }
}

/// Finite-difference check of each estimator's full gradient (D=2, K=3, N=16, fixed noise).
pub fn estimator_gradients(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let (model, data) = conjugate_problem(16, 2, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let mut noise = NoiseBundle::fixed(gaussian(&mut rng, 2), (0..4).map(|_| gaussian(&mut rng, 2)).collect());
    let mut batches = stream_rng(seed, Stream::Minibatch);
    noise.chain_batches = vec![sample_minibatch(16, 4, &mut batches)?];
    noise.final_batch = Some(sample_minibatch(16, 4, &mut batches)?);
    let q0 = BaseDistribution::full_rank(vec![0.15, -0.2], &[vec![0.8], vec![0.25, 0.6]])?;

    let mut dais_vars = annealed(3, 2, q0.clone());
    let mut sl_vars = annealed(3, 2, q0.clone());
    let mut s = RandSurrogate::init_rand(&data, 5, &mut ChaCha8Rng::seed_from_u64(seed))?;
    s.set_params(&[1.0, 1.3, 1.1, 0.8, 1.2])?;
    sl_vars.surrogate = Some(Box::new(s));
    let mut plain = Variational {
        q0,
        anneal: None,
        surrogate: None,
        theta: None,
    };

    let run = |est: &dyn ElboEstimator, vars: &mut Variational| -> f64 {
        let x0 = vars.flat();
        check_gradient(
            |_, p| {
                let bound = vars.bind(p)?;
                Ok(est
                    .estimate(&EstimatorInputs {
                        model: &model,
                        data: &data,
                        bound: &bound,
                        noise: &noise,
                    })?
                    .value)
            },
            &x0,
            1e-6,
        )
        .max_rel_error
    };
    Ok(vec![
        ("mvn", run(&Parametric::full_rank(), &mut plain)),
        ("dais", run(&Dais, &mut dais_vars)),
        ("ns-dais", run(&NsDais, &mut dais_vars)),
        ("sl-dais", run(&SlDais, &mut sl_vars)),
    ])
}

/// Largest difference between each annealed estimator with `K = 0` and the plain ELBO
/// under identical noise, over `draws` noise bundles.
pub fn zero_step_reduction(draws: usize, seed: u64) -> Result<f64> {
    let (model, data) = conjugate_problem(12, 2, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = stream_rng(seed, Stream::Minibatch);
    let q0 = BaseDistribution::mean_field(vec![0.2, -0.3], vec![-0.4, 0.1])?;
    let plain = Variational {
        q0: q0.clone(),
        anneal: None,
        surrogate: None,
        theta: None,
    };
    let chain = annealed(0, 2, q0.clone());
    let mut sl = annealed(0, 2, q0);
    sl.surrogate = Some(Box::new(RandSurrogate::init_rand(&data, 4, &mut rng)?));
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let mut noise = NoiseBundle::fixed(gaussian(&mut rng, 2), vec![gaussian(&mut rng, 2)]);
        let full = value_only(&Parametric::mean_field(), &model, &data, &plain, &noise)?.0;
        worst = worst.max((value_only(&Dais, &model, &data, &chain, &noise)?.0 - full).abs());
        noise.final_batch = Some(sample_minibatch(12, 5, &mut batches)?);
        let batched = value_only(&Parametric::mean_field(), &model, &data, &plain, &noise)?.0;
        worst = worst.max((value_only(&NsDais, &model, &data, &chain, &noise)?.0 - batched).abs());
        worst = worst.max((value_only(&SlDais, &model, &data, &sl, &noise)?.0 - batched).abs());
    }
    Ok(worst)
}

/// Bayes identity `log p(D) = log p(z) + log p(D|z) − log p(z|D)` at random points.
pub fn evidence_identity(seed: u64) -> Result<f64> {
    let (model, data) = conjugate_problem(25, 3, seed);
    let prior = GaussianMoments::prior_of(&model);
    let post = exact_posterior(&prior, data.x(), data.y(), 1.0)?;
    let logz = log_evidence(&prior, data.x(), data.y(), 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let z = gaussian(&mut rng, 3);
        let r = data.x().matvec(&z);
        let ll: f64 = r
            .iter()
            .zip(data.y())
            .map(|(m, y)| -0.5 * (y - m).powi(2) - 0.5 * crate::model::LN_2PI)
            .sum();
        let rhs = model.log_prior_value(&z) + ll - post.log_density(&z)?;
        worst = worst.max((rhs - logz).abs());
    }
    Ok(worst)
}

/// Runs the whole suite.
pub fn run_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<(bool, String)>| {
        let (passed, detail) = r.unwrap_or_else(|e| (false, e.to_string()));
        out.push(CheckResult {
            name: name.into(),
            passed,
            detail,
        });
    };
    push(
        "leapfrog reversibility and volume",
        leapfrog_geometry(200, 1).map(|g| {
            (
                g.max_reversibility_error <= 1e-9 && g.max_det_error <= 1e-6,
                format!("reversibility {:.2e}, |det-1| {:.2e}", g.max_reversibility_error, g.max_det_error),
            )
        }),
    );
    push(
        "refresh ratio equals kinetic difference",
        refresh_ratio_error(1000, 2).map(|e| (e <= 1e-10, format!("max error {e:.2e}"))),
    );
    push(
        "estimator gradients",
        estimator_gradients(3).map(|v| {
            let worst = v.iter().map(|(_, e)| *e).fold(0.0, f64::max);
            (
                worst <= 1e-4,
                v.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", "),
            )
        }),
    );
    push(
        "zero-step chains equal the plain bound",
        zero_step_reduction(50, 4).map(|e| (e == 0.0, format!("max difference {e:.2e}"))),
    );
    push(
        "evidence identity",
        evidence_identity(5).map(|e| (e <= 1e-10, format!("max error {e:.2e}"))),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for r in run_checks() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
