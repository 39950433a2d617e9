//! Independent, reproducible random streams derived from one run seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Each consumer of randomness draws from its own ChaCha stream so that, for example,
/// changing the minibatch size never perturbs the integrator noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Reparameterization and momentum noise during training.
    Noise = 1,
    Minibatch = 2,
    Surrogate = 3,
    /// Post-training evaluation samples.
    Eval = 4,
    /// Synthetic data generation.
    Gen = 5,
    /// Minibatches of post-training evaluation samples.
    EvalBatch = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Uniform size-`b` subset of `0..n` without replacement, in ascending order.
pub fn sample_minibatch<R: Rng + ?Sized>(n: usize, b: usize, rng: &mut R) -> Result<Vec<usize>> {
    if b == 0 || b > n {
        return Err(Error::usage(format!("batch size {b} must lie in 1..={n}")));
    }
    let mut idx = rand::seq::index::sample(rng, n, b).into_vec();
    idx.sort_unstable();
    Ok(idx)
}
