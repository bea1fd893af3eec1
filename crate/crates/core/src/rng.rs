//! Seeded, splittable random streams.
//!
//! Every stochastic operation in the crate draws from a [`ChaCha8Rng`]
//! obtained here. A run is identified by a single 64-bit seed; independent
//! sub-streams (per document, per phase of a run) are addressed by a stream id
//! so that parallel work stays reproducible regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as LabRng;

/// Stream ids reserved for the phases of a training run.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const TRAIN: u64 = 1;
    pub const CORPUS: u64 = 2;
    pub const MONTE_CARLO: u64 = 3;
}

/// Generator for `stream` under `seed`. Distinct streams never overlap.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derive a child seed from a parent seed and a label (splitmix64 finalizer).
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
