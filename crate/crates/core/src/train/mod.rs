//! Training loop, configuration, data ingestion and run artifacts.

mod adam;
pub mod check;
mod config;
mod data;
mod fit;
mod metrics;

pub use crate::rng::sample_minibatch;
pub use adam::{AdamState, LrSchedule};
pub use config::{Flags, Freeze, PriorSpec, RunConfig};
pub use data::{generate, load_csv, read_csv, write_csv, GenSpec};
pub use fit::{fit_with_data, run_fit, Checkpoint, EvalSummary, FinalReport, FitOutcome, Session};
pub use metrics::{emit_metrics, MetricRecord};
