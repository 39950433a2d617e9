use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One line of the metrics stream. Chain fields are `null` for parametric methods and
/// `elbo_sample` is `null` on a step skipped after a divergence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub elbo_sample: Option<f64>,
    pub lr: f64,
    pub eta_tilde: Option<f64>,
    pub kappa: Option<f64>,
    pub gamma: Option<f64>,
    /// Cumulative count of skipped steps.
    pub divergences: usize,
    pub wall_ms: u64,
}

/// Writes `record` as a single newline-terminated JSON line.
pub fn emit_metrics(out: &mut dyn Write, record: &MetricRecord) -> Result<()> {
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    out.write_all(&line)?;
    Ok(())
}
