use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::DataView;
use crate::vardist::BaseKind;

use super::dynamics::{kinetic_diff_tape, leapfrog_tape, refresh_tape};
use super::{BatchPlan, Diagnostics, ElboEstimate, ElboEstimator, EstimatorInputs};

/// Single-sample reparameterized ELBO `log p̂(D, z) - log q₀(z)` (mean-field or full-rank).
pub struct Parametric {
    name: &'static str,
    base: BaseKind,
}

impl Parametric {
    pub fn mean_field() -> Self {
        Self {
            name: "mf",
            base: BaseKind::MeanField,
        }
    }

    pub fn full_rank() -> Self {
        Self {
            name: "mvn",
            base: BaseKind::FullRank,
        }
    }
}

/// Annealed chain with the full-data likelihood in every bridging density.
pub struct Dais;

/// Annealed chain driven by a scaled minibatch likelihood drawn once before the chain
/// (or once per step with per-step batches).
pub struct NsDais;

/// Annealed chain driven by a surrogate likelihood; data enter only the final term.
pub struct SlDais;

fn divergence(step: usize) -> impl Fn(Error) -> Error {
    move |e| {
        if e.is_divergence() {
            Error::Divergence {
                step,
                reason: e.to_string(),
            }
        } else {
            e
        }
    }
}

/// `Ψ_L` over the final batch, scaled by `N/B`, or over the full data.
fn final_log_lik<'t>(inputs: &EstimatorInputs<'_, 't>, z: Var<'t>) -> Result<Var<'t>> {
    let theta = inputs.bound.theta;
    match &inputs.noise.final_batch {
        None => inputs.model.log_lik(&inputs.data.full_view(), z, theta, None),
        Some(idx) => {
            let view = inputs.data.view(idx)?;
            let scale = inputs.data.n() as f64 / idx.len() as f64;
            inputs.model.log_lik(&view, z, theta, None)?.scale(scale)
        }
    }
}

/// `L + Ψ₀(z) + Ψ̂_L(z)`, in that order for every estimator.
fn finish<'t>(inputs: &EstimatorInputs<'_, 't>, running: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
    running.add(inputs.model.log_prior(z)?)?.add(final_log_lik(inputs, z)?)
}

fn initial_z<'t>(inputs: &EstimatorInputs<'_, 't>) -> Result<Var<'t>> {
    let q0 = &inputs.bound.q0;
    if inputs.noise.eps_z.len() != q0.dim() {
        return Err(Error::usage("noise bundle z-draw has the wrong dimension"));
    }
    q0.sample_reparam(inputs.bound.q0.tape().var(inputs.noise.eps_z.clone())?)
}

/// Runs the annealed chain with `grad_ll(k, ẑ)` supplying the likelihood part of the drift.
fn run_chain<'t>(
    inputs: &EstimatorInputs<'_, 't>,
    grad_ll: impl Fn(usize, Var<'t>) -> Result<Var<'t>>,
) -> Result<ElboEstimate<'t>> {
    let bound = inputs.bound;
    let anneal = bound
        .anneal
        .as_ref()
        .ok_or_else(|| Error::usage("annealed estimators need an annealing state"))?;
    let k = anneal.betas.len();
    let noise = inputs.noise;
    if noise.eps_v.len() != k + 1 {
        return Err(Error::usage(format!("noise bundle has {} momentum draws, need {}", noise.eps_v.len(), k + 1)));
    }
    let q0 = bound.q0;
    let tape = bound.q0.tape();
    let model = inputs.model;

    let init = || -> Result<_> {
        let z0 = initial_z(inputs)?;
        let running = q0.log_density(z0)?.neg()?;
        let inv_mass = tape.scalar(1.0)?.div(anneal.mass)?;
        let sqrt_mass = anneal.mass.sqrt()?;
        let v0 = sqrt_mass.mul(tape.var(noise.eps_v[0].clone())?)?;
        Ok((z0, v0, running, inv_mass, sqrt_mass))
    };
    let (mut z, mut v, mut running, inv_mass, sqrt_mass) = init().map_err(divergence(0))?;
    let mut diagnostics = Diagnostics::default();

    for i in 0..k {
        let step = i + 1;
        let beta = anneal.betas[i];
        let eta = anneal.etas[i];
        let advance = || -> Result<_> {
            let drift = |zh: Var<'t>| -> Result<Var<'t>> {
                let target = model.grad_log_prior(zh)?.add(grad_ll(i, zh)?)?;
                let base = q0.grad_log_density(zh)?;
                let one_minus = tape.scalar(1.0)?.sub(beta)?;
                target.mul(beta)?.add(one_minus.mul(base)?)
            };
            let (zn, vh) = leapfrog_tape(z, v, eta, inv_mass, drift)?;
            let kd = kinetic_diff_tape(vh, v, inv_mass)?;
            let running = running.add(kd)?;
            let vn = if step < k {
                refresh_tape(vh, anneal.gamma, sqrt_mass, tape.var(noise.eps_v[step].clone())?)?
            } else {
                vh
            };
            Ok((zn, vn, running, kd))
        };
        let (zn, vn, r, kd) = advance().map_err(divergence(step))?;
        diagnostics.etas.push(eta.scalar());
        diagnostics.betas.push(beta.scalar());
        diagnostics.kinetic.push(kd.scalar());
        z = zn;
        v = vn;
        running = r;
    }
    let value = finish(inputs, running, z).map_err(divergence(k))?;
    Ok(ElboEstimate {
        value,
        z_final: z.value(),
        diagnostics,
    })
}

impl ElboEstimator for Parametric {
    fn name(&self) -> &'static str {
        self.name
    }

    fn default_base(&self) -> BaseKind {
        self.base
    }

    fn annealed(&self) -> bool {
        false
    }

    fn batch_plan(&self, _: usize, batch_size: usize, _: bool) -> BatchPlan {
        BatchPlan {
            batch_size,
            chain_batches: 0,
            final_batch: true,
        }
    }

    fn estimate<'a, 't>(&self, inputs: &EstimatorInputs<'a, 't>) -> Result<ElboEstimate<'t>> {
        let z = initial_z(inputs)?;
        let running = inputs.bound.q0.log_density(z)?.neg()?;
        let value = finish(inputs, running, z)?;
        Ok(ElboEstimate {
            value,
            z_final: z.value(),
            diagnostics: Diagnostics::default(),
        })
    }
}

impl ElboEstimator for Dais {
    fn name(&self) -> &'static str {
        "dais"
    }

    fn default_base(&self) -> BaseKind {
        BaseKind::MeanField
    }

    fn annealed(&self) -> bool {
        true
    }

    fn batch_plan(&self, _: usize, batch_size: usize, _: bool) -> BatchPlan {
        BatchPlan {
            batch_size,
            chain_batches: 0,
            final_batch: false,
        }
    }

    fn estimate<'a, 't>(&self, inputs: &EstimatorInputs<'a, 't>) -> Result<ElboEstimate<'t>> {
        let full = inputs.data.full_view();
        let theta = inputs.bound.theta;
        run_chain(inputs, |_, zh| inputs.model.grad_log_lik(&full, zh, theta, None))
    }
}

impl ElboEstimator for NsDais {
    fn name(&self) -> &'static str {
        "ns-dais"
    }

    fn default_base(&self) -> BaseKind {
        BaseKind::MeanField
    }

    fn annealed(&self) -> bool {
        true
    }

    fn batch_plan(&self, k: usize, batch_size: usize, per_step_batches: bool) -> BatchPlan {
        BatchPlan {
            batch_size,
            chain_batches: if per_step_batches { k } else { 1 },
            final_batch: true,
        }
    }

    fn estimate<'a, 't>(&self, inputs: &EstimatorInputs<'a, 't>) -> Result<ElboEstimate<'t>> {
        let batches = &inputs.noise.chain_batches;
        let k = inputs.bound.anneal.as_ref().map_or(0, |a| a.betas.len());
        if k > 0 && batches.len() != 1 && batches.len() != k {
            return Err(Error::usage("NS-DAIS needs one chain minibatch or one per step"));
        }
        let views = batches
            .iter()
            .map(|idx| inputs.data.view(idx))
            .collect::<Result<Vec<DataView>>>()?;
        let n = inputs.data.n() as f64;
        let theta = inputs.bound.theta;
        run_chain(inputs, |i, zh| {
            let view = if views.len() == 1 { &views[0] } else { &views[i] };
            inputs
                .model
                .grad_log_lik(view, zh, theta, None)?
                .scale(n / view.len() as f64)
        })
    }
}

impl ElboEstimator for SlDais {
    fn name(&self) -> &'static str {
        "sl-dais"
    }

    fn default_base(&self) -> BaseKind {
        BaseKind::MeanField
    }

    fn annealed(&self) -> bool {
        true
    }

    fn needs_surrogate(&self) -> bool {
        true
    }

    fn batch_plan(&self, _: usize, batch_size: usize, _: bool) -> BatchPlan {
        BatchPlan {
            batch_size,
            chain_batches: 0,
            final_batch: true,
        }
    }

    fn estimate<'a, 't>(&self, inputs: &EstimatorInputs<'a, 't>) -> Result<ElboEstimate<'t>> {
        let (surr, p) = inputs
            .bound
            .surrogate
            .ok_or_else(|| Error::usage("SL-DAIS needs a surrogate likelihood"))?;
        let theta = inputs.bound.theta;
        run_chain(inputs, |_, zh| surr.grad_log_lik(inputs.model, zh, theta, p))
    }
}
