//! Deterministic, splittable random streams.
//!
//! Every consumer names its stream with a `(seed, stream_id)` pair, so a
//! worker's draws never depend on how many other workers exist or in what
//! order they run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Reserved stream ids used by the trainer; other ids are free for callers.
pub mod streams {
    pub const DATASET: u64 = 0;
    pub const HOLDOUT: u64 = 1;
    pub const BATCH_SAMPLING: u64 = 2;
    pub const INIT_WEIGHTS: u64 = 3;
    pub const TEACHER: u64 = 4;
}

/// Counter-based stream: identical `(seed, stream_id)` always yields the
/// identical sequence.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
    seed: u64,
    stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { rng, seed, stream_id }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
