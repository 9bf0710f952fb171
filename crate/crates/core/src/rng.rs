//! Seed derivation and the project-wide RNG type.
//!
//! Every stochastic component draws from its own [`Rng`] seeded through
//! [`child_seed`], so adding a component never shifts another component's
//! stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The deterministic RNG used throughout the crate.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a child seed from a master seed, a component name, and an index.
///
/// Stable across platforms and runs; two distinct (component, index) pairs
/// yield independent-looking streams.
pub fn child_seed(master: u64, component: &str, index: u64) -> u64 {
    let mut z = splitmix64(master);
    z = splitmix64(z ^ fnv1a(component.as_bytes()));
    splitmix64(z ^ index)
}

/// Seeds an [`Rng`] directly from a 64-bit seed.
pub fn make_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Convenience: RNG for a named child stream.
pub fn child_rng(master: u64, component: &str, index: u64) -> Rng {
    make_rng(child_seed(master, component, index))
}
