//! Seeded random streams. Every consumer of randomness draws from its own
//! ChaCha stream keyed by (seed, stream id), so results do not depend on the
//! order in which independent consumers run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const BATCH_ORDER: u64 = 1;
pub const SPLIT: u64 = 2;
pub const GENERATOR: u64 = 3;
pub const PERTURBATION: u64 = 4;
pub const INIT_BASE: u64 = 1_000;
pub const DROPOUT_BASE: u64 = 2_000;
pub const BOOTSTRAP_BASE: u64 = 3_000;

pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mix two integers into a new seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
