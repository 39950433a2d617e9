//! Reverse-mode automatic differentiation over dense `f64` vectors.
//!
//! Every operation is recorded on a [`Tape`] together with its primal value; a single
//! reverse sweep from a scalar output accumulates adjoints into per-node slots.
//! Scalars are length-1 vectors and broadcast in the elementwise binary operations.

mod check;
mod tape;

pub use check::{check_gradient, GradCheck};
pub use tape::{NodeId, SweepStats, Tape, Var};

pub(crate) use tape::{sigmoid, tril_index};
