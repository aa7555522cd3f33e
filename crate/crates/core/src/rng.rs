//! Seeded random streams.
//!
//! Every consumer of randomness asks for its own stream, keyed by a purpose tag
//! and an index, all derived from one root seed. ChaCha is counter based, so a
//! stream is fully determined by `(seed, purpose, index)` no matter how many
//! other streams were drawn before it or on which thread.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags. Distinct tags keep streams independent.
pub mod purpose {
    pub const SYNTH_PLACEMENT: u32 = 1;
    pub const SYNTH_OBJECT: u32 = 2;
    pub const SYNTH_EMBEDDING: u32 = 3;
    pub const PERTURB: u32 = 4;
    pub const TEACHER_PIXEL: u32 = 5;
    pub const TEACHER_EMBED: u32 = 6;
    pub const FEATURE_INIT: u32 = 7;
    pub const HEAD_INIT: u32 = 8;
    pub const VIEW_SCHEDULE: u32 = 9;
    pub const SMOOTHING_SAMPLE: u32 = 10;
    pub const CONTRASTIVE_SAMPLE: u32 = 11;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, purpose: u32, index: u64) -> Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((purpose as u64) << 40) ^ index);
        rng
    }
}
