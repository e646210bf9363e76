//! Seed derivation. Every stochastic component owns a ChaCha stream whose
//! seed is mixed from the master seed, a stream label and an index, so work
//! can be split across threads without changing the numbers drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base`, a stream label and an index into a new 64-bit seed.
pub fn derive_seed(base: u64, stream: &str, index: u64) -> u64 {
    let mut h = splitmix64(base);
    for b in stream.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ splitmix64(index))
}

pub fn rng_for(base: u64, stream: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(base, stream, index))
}
