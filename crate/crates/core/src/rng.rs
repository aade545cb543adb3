//! Seeded randomness.
//!
//! Every random draw in the crate comes from [`ChaCha8Rng`], a counter-based
//! generator whose output is fixed by its 256-bit key on every platform. Named
//! sub-streams are derived from a run seed with SplitMix64 so that independent
//! consumers (weight init, shuffling, phantom samples) never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a label, used to turn stream names into integers.
fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derives a child seed from a parent seed and a stream label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    mix64(seed ^ mix64(label_hash(label)))
}

/// Generator for the named stream of `seed`.
pub fn stream(seed: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, label))
}

/// Generator for the `index`-th element of the named stream.
pub fn indexed_stream(seed: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(mix64(derive_seed(seed, label) ^ mix64(index)))
}
