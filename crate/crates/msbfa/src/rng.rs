//! Seeded random-number streams.
//!
//! Every stochastic routine in the crate takes an explicit generator so runs
//! are reproducible from a single `u64` seed. ChaCha8 supports cheap
//! independent streams from one seed, which is how parallel chains and
//! replicate grids stay deterministic regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for the main chain of a run.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent generator for a sub-task (chain, replicate, fold) of a run.
///
/// Stream 0 is the main chain itself: `stream_rng(seed, 0)` produces exactly
/// the same draws as `seeded_rng(seed)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
