use super::{Tape, Var};
use crate::error::Result;

/// Outcome of comparing reverse-mode gradients against central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub autodiff: Vec<f64>,
    pub finite_diff: Vec<f64>,
    /// `max_i |AD_i - FD_i| / (|FD_i| + 1e-12)`; NaN if any evaluation was non-finite.
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

fn eval_primal<F>(f: &F, x: &[f64]) -> f64
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    tape.var(x.to_vec())
        .and_then(|v| f(&tape, v))
        .map(|out| out.scalar())
        .unwrap_or(f64::NAN)
}

/// Checks the gradient of the scalar function `f` at `x0` with central differences of step `h`.
pub fn check_gradient<F>(f: F, x0: &[f64], h: f64) -> GradCheck
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let autodiff = tape
        .var(x0.to_vec())
        .and_then(|x| {
            let out = f(&tape, x)?;
            tape.gradient(out, &[x])
        })
        .map(|mut g| g.remove(0))
        .unwrap_or_else(|_| vec![f64::NAN; x0.len()]);

    let mut x = x0.to_vec();
    let finite_diff: Vec<f64> = (0..x0.len())
        .map(|i| {
            x[i] = x0[i] + h;
            let up = eval_primal(&f, &x);
            x[i] = x0[i] - h;
            let down = eval_primal(&f, &x);
            x[i] = x0[i];
            (up - down) / (2.0 * h)
        })
        .collect();

    let mut max_rel_error: f64 = 0.0;
    for (a, d) in autodiff.iter().zip(&finite_diff) {
        let err = (a - d).abs() / (d.abs() + 1e-12);
        if !err.is_finite() {
            max_rel_error = f64::NAN;
            break;
        }
        max_rel_error = max_rel_error.max(err);
    }
    GradCheck {
        autodiff,
        finite_diff,
        max_rel_error,
    }
}
