//! Deterministic random streams.
//!
//! Every randomized operation takes an explicit [`Stream`]. Per-trial streams
//! are derived from `(base_seed, trial)` by selecting the ChaCha stream id, so
//! trials are reproducible and never share keystream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Stream for a single seed (stream id 0).
pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream `trial` of the family keyed by `base_seed`.
pub fn trial_stream(base_seed: u64, trial: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(trial);
    rng
}
