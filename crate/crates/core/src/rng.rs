//! Seeded random streams.
//!
//! Every random draw in an experiment comes from a stream whose seed is
//! `seed ^ (purpose << 48) ^ iteration`. Purposes occupy the top 16 bits and
//! iterations the low 48, so two different (purpose, iteration) pairs of the
//! same run never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout.
pub type StreamRng = ChaCha8Rng;

/// What a stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Rollout = 1,
    ModelSamples = 2,
    Snapshot = 3,
    EnvDraw = 4,
}

pub fn stream_seed(seed: u64, purpose: Purpose, iteration: u64) -> u64 {
    debug_assert!(iteration < 1 << 48);
    seed ^ ((purpose as u64) << 48) ^ iteration
}

pub fn stream(seed: u64, purpose: Purpose, iteration: u64) -> StreamRng {
    StreamRng::seed_from_u64(stream_seed(seed, purpose, iteration))
}
