//! Deterministic, stream-addressed randomness.
//!
//! Every stochastic component (environment, policy, trainer, planner worker)
//! owns its own stream so that adding draws to one component never shifts
//! another. ChaCha streams are portable across platforms and rand versions.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Well-known stream ids. Streams only need to be distinct per seed.
pub mod streams {
    pub const ENV: u64 = 1;
    pub const POLICY: u64 = 2;
    pub const CODEC_INIT: u64 = 3;
    pub const CODEC_BATCH: u64 = 4;
    pub const PRIOR_INIT: u64 = 5;
    pub const PRIOR_BATCH: u64 = 6;
    pub const PLANNER: u64 = 7;
    pub const MDP_GEN: u64 = 8;
    pub const EVAL: u64 = 9;
}

/// An rng on stream `stream` of the root `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
