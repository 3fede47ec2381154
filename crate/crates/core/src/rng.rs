//! Seeded random streams. Every stochastic routine takes its generator
//! from here so runs are reproducible from a single master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Name of the generator recorded in experiment outputs.
pub const RNG_NAME: &str = "chacha8";

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Independent substream `stream` of `seed`.
pub fn substream(seed: u64, stream: u64) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Child seed for trial `index` of a run seeded with `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
