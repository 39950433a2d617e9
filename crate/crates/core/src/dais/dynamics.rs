//! Leapfrog integration and partial momentum refreshment with a diagonal mass matrix.
//!
//! Plain-value versions serve tests and diagnostics; the `*_tape` versions are what the
//! estimators differentiate through.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::LN_2PI;

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// One leapfrog step: `ẑ = z + (η/2)M⁻¹v`, `v̂ = v + η∇log f(ẑ)`, `z' = ẑ + (η/2)M⁻¹v̂`.
///
/// Returns `(z', v̂)`. A non-finite state is reported as a divergence at step 1.
pub fn leapfrog(
    z: &[f64],
    v: &[f64],
    eta: f64,
    mass: &[f64],
    mut grad_log_density: impl FnMut(&[f64]) -> Vec<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if eta < 0.0 || mass.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::usage("leapfrog needs eta >= 0 and a positive mass"));
    }
    let half = 0.5 * eta;
    let zh: Vec<f64> = (0..z.len()).map(|i| z[i] + half * v[i] / mass[i]).collect();
    let g = grad_log_density(&zh);
    let vh: Vec<f64> = (0..v.len()).map(|i| v[i] + eta * g[i]).collect();
    let zn: Vec<f64> = (0..z.len()).map(|i| zh[i] + half * vh[i] / mass[i]).collect();
    if !finite(&zn) || !finite(&vh) {
        return Err(Error::Divergence {
            step: 1,
            reason: "non-finite state after leapfrog".into(),
        });
    }
    Ok((zn, vh))
}

/// `v = γv̂ + √(1-γ²)·√M·ε`.
pub fn refresh(v_hat: &[f64], gamma: f64, mass: &[f64], eps: &[f64]) -> Vec<f64> {
    let c = (1.0 - gamma * gamma).sqrt();
    (0..v_hat.len())
        .map(|i| gamma * v_hat[i] + c * mass[i].sqrt() * eps[i])
        .collect()
}

/// `log N(v̂ | 0, M) - log N(v_prev | 0, M)`.
pub fn kinetic_diff(v_hat: &[f64], v_prev: &[f64], mass: &[f64]) -> f64 {
    let q = |v: &[f64]| v.iter().zip(mass).map(|(x, m)| x * x / m).sum::<f64>();
    -0.5 * (q(v_hat) - q(v_prev))
}

/// `log N(v_to | γ v_from, (1-γ²) M)`.
pub fn refresh_log_density(v_to: &[f64], v_from: &[f64], gamma: f64, mass: &[f64]) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::usage(format!("refresh kernel is degenerate for gamma = {gamma}")));
    }
    let s = 1.0 - gamma * gamma;
    Ok(v_to
        .iter()
        .zip(v_from)
        .zip(mass)
        .map(|((t, f), m)| {
            let var = s * m;
            -0.5 * ((t - gamma * f).powi(2) / var + var.ln() + LN_2PI)
        })
        .sum())
}

/// Position, momentum and running bound of a chain on the tape.
#[derive(Clone, Copy)]
pub struct ChainState<'t> {
    pub z: Var<'t>,
    pub v: Var<'t>,
    pub running_elbo: Var<'t>,
}

/// Tape leapfrog; `grad` evaluates `∇_z log f_k` at the half-step position.
pub fn leapfrog_tape<'t>(
    z: Var<'t>,
    v: Var<'t>,
    eta: Var<'t>,
    inv_mass: Var<'t>,
    grad: impl FnOnce(Var<'t>) -> Result<Var<'t>>,
) -> Result<(Var<'t>, Var<'t>)> {
    let half = eta.scale(0.5)?.mul(inv_mass)?;
    let zh = half.mul(v)?.add(z)?;
    let vh = eta.mul(grad(zh)?)?.add(v)?;
    let zn = half.mul(vh)?.add(zh)?;
    Ok((zn, vh))
}

pub fn refresh_tape<'t>(v_hat: Var<'t>, gamma: Var<'t>, sqrt_mass: Var<'t>, eps: Var<'t>) -> Result<Var<'t>> {
    let tape = v_hat.tape();
    let c = tape.scalar(1.0)?.sub(gamma.square()?)?.sqrt()?;
    gamma.mul(v_hat)?.add(c.mul(sqrt_mass)?.mul(eps)?)
}

pub fn kinetic_diff_tape<'t>(v_hat: Var<'t>, v_prev: Var<'t>, inv_mass: Var<'t>) -> Result<Var<'t>> {
    let a = v_hat.square()?.dot(inv_mass)?;
    let b = v_prev.square()?.dot(inv_mass)?;
    a.sub(b)?.scale(-0.5)
}
