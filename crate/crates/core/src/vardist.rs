//! Reparameterizable Gaussian base distributions q₀(z).
//!
//! Parameters are stored flat as `loc ++ scale_raw`. For the mean-field family `scale_raw`
//! holds log standard deviations; for the full-rank family it holds the packed row-major
//! lower triangle of the Cholesky factor with the diagonal entries in log space.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{tril_index, Tape, Var};
use crate::error::{Error, Result};
use crate::model::LN_2PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseKind {
    MeanField,
    FullRank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseDistribution {
    kind: BaseKind,
    loc: Vec<f64>,
    scale_raw: Vec<f64>,
}

impl BaseDistribution {
    /// Standard normal start: `loc = 0`, unit scales (`L = I` for full rank).
    pub fn standard(kind: BaseKind, dim: usize) -> Self {
        let scale_raw = match kind {
            BaseKind::MeanField => vec![0.0; dim],
            BaseKind::FullRank => vec![0.0; dim * (dim + 1) / 2],
        };
        Self {
            kind,
            loc: vec![0.0; dim],
            scale_raw,
        }
    }

    pub fn mean_field(loc: Vec<f64>, log_scale: Vec<f64>) -> Result<Self> {
        if loc.len() != log_scale.len() || loc.is_empty() {
            return Err(Error::usage("loc and log_scale must have the same nonzero length"));
        }
        Ok(Self {
            kind: BaseKind::MeanField,
            loc,
            scale_raw: log_scale,
        })
    }

    /// Full-rank normal with Cholesky factor `L` given as lower-triangular rows.
    pub fn full_rank(loc: Vec<f64>, tril_rows: &[Vec<f64>]) -> Result<Self> {
        let d = loc.len();
        if d == 0 || tril_rows.len() != d {
            return Err(Error::usage("tril_rows must have one row per dimension"));
        }
        let mut scale_raw = Vec::with_capacity(d * (d + 1) / 2);
        for (i, row) in tril_rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::usage(format!("tril row {i} must have {} entries", i + 1)));
            }
            if !(row[i] > 0.0) {
                return Err(Error::usage("Cholesky factor needs a strictly positive diagonal"));
            }
            scale_raw.extend_from_slice(&row[..i]);
            scale_raw.push(row[i].ln());
        }
        Ok(Self {
            kind: BaseKind::FullRank,
            loc,
            scale_raw,
        })
    }

    /// A full-rank distribution with the same moments as a mean-field one.
    pub fn to_full_rank(&self) -> Self {
        match self.kind {
            BaseKind::FullRank => self.clone(),
            BaseKind::MeanField => {
                let d = self.dim();
                let mut scale_raw = vec![0.0; d * (d + 1) / 2];
                for (i, s) in self.scale_raw.iter().enumerate() {
                    scale_raw[tril_index(i, i)] = *s;
                }
                Self {
                    kind: BaseKind::FullRank,
                    loc: self.loc.clone(),
                    scale_raw,
                }
            }
        }
    }

    pub fn kind(&self) -> BaseKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.loc.len()
    }

    pub fn loc(&self) -> &[f64] {
        &self.loc
    }

    pub fn n_params(&self) -> usize {
        self.loc.len() + self.scale_raw.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.loc.clone();
        p.extend_from_slice(&self.scale_raw);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::usage(format!("expected {} q0 parameters, got {}", self.n_params(), p.len())));
        }
        let d = self.dim();
        self.loc.copy_from_slice(&p[..d]);
        self.scale_raw.copy_from_slice(&p[d..]);
        Ok(())
    }

    /// Cholesky factor of the covariance as dense lower-triangular rows.
    pub fn tril_rows(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        match self.kind {
            BaseKind::MeanField => (0..d)
                .map(|i| {
                    let mut row = vec![0.0; i + 1];
                    row[i] = self.scale_raw[i].exp();
                    row
                })
                .collect(),
            BaseKind::FullRank => (0..d)
                .map(|i| {
                    (0..=i)
                        .map(|j| {
                            let v = self.scale_raw[tril_index(i, j)];
                            if i == j {
                                v.exp()
                            } else {
                                v
                            }
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Dense covariance `L Lᵀ`, row-major.
    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let l = self.tril_rows();
        let d = self.dim();
        let mut cov = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..d {
                cov[i][j] = (0..=i.min(j)).map(|k| l[i][k] * l[j][k]).sum();
            }
        }
        cov
    }

    /// Plain-value reparameterized sample.
    pub fn sample_reparam(&self, eps: &[f64]) -> Vec<f64> {
        let l = self.tril_rows();
        self.loc
            .iter()
            .enumerate()
            .map(|(i, m)| m + l[i].iter().zip(eps).map(|(a, e)| a * e).sum::<f64>())
            .collect()
    }

    /// Plain-value log density.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        let tape = Tape::new();
        let eval = || -> Result<f64> {
            let bound = self.bind(tape.var(self.params())?)?;
            Ok(bound.log_density(tape.var(z.to_vec())?)?.scalar())
        };
        eval().unwrap_or(f64::NAN)
    }

    /// Binds the distribution to tape parameters `p` laid out as [`Self::params`].
    pub fn bind<'t>(&self, p: Var<'t>) -> Result<BoundBase<'t>> {
        if p.len() != self.n_params() {
            return Err(Error::usage(format!("expected {} q0 parameters, got {}", self.n_params(), p.len())));
        }
        let d = self.dim();
        let loc = p.slice(0, d)?;
        let raw = p.slice(d, self.n_params() - d)?;
        let (scale, log_det_half) = match self.kind {
            BaseKind::MeanField => (raw.exp()?, raw.sum()?),
            BaseKind::FullRank => {
                let mask = Arc::new(diag_mask(d));
                let zeros = p.tape().var(vec![0.0; raw.len()])?;
                (raw.exp()?.select(&mask, raw)?, raw.select(&mask, zeros)?.sum()?)
            }
        };
        Ok(BoundBase {
            kind: self.kind,
            loc,
            scale,
            log_det_half,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json: BaseJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_json(json)
    }

    pub fn to_json(&self) -> BaseJson {
        match self.kind {
            BaseKind::MeanField => BaseJson {
                kind: self.kind,
                loc: self.loc.clone(),
                log_scale: Some(self.scale_raw.clone()),
                tril_rows: None,
            },
            BaseKind::FullRank => BaseJson {
                kind: self.kind,
                loc: self.loc.clone(),
                log_scale: None,
                tril_rows: Some(self.tril_rows()),
            },
        }
    }

    pub fn from_json(json: BaseJson) -> Result<Self> {
        match (json.kind, json.log_scale, json.tril_rows) {
            (BaseKind::MeanField, Some(ls), _) => Self::mean_field(json.loc, ls),
            (BaseKind::FullRank, _, Some(rows)) => Self::full_rank(json.loc, &rows),
            (kind, ..) => Err(Error::config(format!("q0 of kind {kind:?} is missing its scale parameters"))),
        }
    }
}

/// Serialized form: `{kind, loc, log_scale | tril_rows}`. `tril_rows` holds the Cholesky
/// factor itself (positive diagonal), not its log-diagonal parameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseJson {
    pub kind: BaseKind,
    pub loc: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_scale: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tril_rows: Option<Vec<Vec<f64>>>,
}

fn diag_mask(d: usize) -> Vec<bool> {
    let mut mask = vec![false; d * (d + 1) / 2];
    for i in 0..d {
        mask[tril_index(i, i)] = true;
    }
    mask
}

/// q₀ with its parameters living on a tape.
#[derive(Clone, Copy)]
pub struct BoundBase<'t> {
    kind: BaseKind,
    loc: Var<'t>,
    /// Standard deviations (mean field) or the packed factor `L` (full rank).
    scale: Var<'t>,
    /// `½ log det Σ`.
    log_det_half: Var<'t>,
}

impl<'t> BoundBase<'t> {
    pub fn dim(&self) -> usize {
        self.loc.len()
    }

    pub fn tape(&self) -> &'t Tape {
        self.loc.tape()
    }

    /// `loc + σ ⊙ ε` or `loc + L ε`.
    pub fn sample_reparam(&self, eps: Var<'t>) -> Result<Var<'t>> {
        self.check(&eps)?;
        match self.kind {
            BaseKind::MeanField => self.scale.mul(eps)?.add(self.loc),
            BaseKind::FullRank => self.scale.tril_matvec(eps)?.add(self.loc),
        }
    }

    fn whiten(&self, z: Var<'t>) -> Result<Var<'t>> {
        self.check(&z)?;
        let diff = z.sub(self.loc)?;
        match self.kind {
            BaseKind::MeanField => diff.div(self.scale),
            BaseKind::FullRank => self.scale.tril_solve(diff),
        }
    }

    pub fn log_density(&self, z: Var<'t>) -> Result<Var<'t>> {
        let u = self.whiten(z)?;
        let c = z.tape().scalar(-0.5 * self.dim() as f64 * LN_2PI)?;
        u.dot(u)?.scale(-0.5)?.sub(self.log_det_half)?.add(c)
    }

    /// `∇_z log q₀(z) = -Σ⁻¹ (z - loc)`.
    pub fn grad_log_density(&self, z: Var<'t>) -> Result<Var<'t>> {
        let u = self.whiten(z)?;
        match self.kind {
            BaseKind::MeanField => u.div(self.scale)?.neg(),
            BaseKind::FullRank => self.scale.tril_solve_t(u)?.neg(),
        }
    }

    fn check(&self, v: &Var<'t>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::usage(format!("vector of length {} for a {}-dimensional q0", v.len(), self.dim())));
        }
        Ok(())
    }
}
