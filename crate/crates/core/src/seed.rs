//! Named, splittable seed derivation.
//!
//! Every random draw in the crate comes from one 64-bit root seed. A child
//! seed is derived from a parent and a label:
//!
//! ```text
//! derive(parent, label) = splitmix64(parent XOR fnv1a64(label))
//! ```
//!
//! Labels are path-like (`"haze/A"`, `"clean/train/0007.png"`), so independent
//! consumers never share a stream and adding a consumer never shifts the
//! draws of another. Streams are ChaCha8 seeded from the derived value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(label: &str) -> u64 {
    label.bytes().fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(parent: u64, label: &str) -> u64 {
    splitmix64(parent ^ fnv1a64(label))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(parent: u64, label: &str) -> ChaCha8Rng {
    rng(derive(parent, label))
}
