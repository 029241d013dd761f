//! Seed derivation. Every random draw in the pipeline comes from a ChaCha
//! stream whose seed is a pure function of the master seed and the position
//! of the work item, so results do not depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a master seed with a stream label and an item index.
pub fn derive_seed(master: u64, stream: &str, index: u64) -> u64 {
    let mut h = splitmix64(master);
    for b in stream.bytes() {
        h = splitmix64(h ^ b as u64);
    }
    splitmix64(h ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng_for(master: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}

/// Stateless hash of a pixel position to `[0, 1)`.
#[inline]
pub fn hash_unit(seed: u64, x: u64, y: u64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(x.wrapping_mul(0x9E37_79B9) ^ (y << 32)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}
