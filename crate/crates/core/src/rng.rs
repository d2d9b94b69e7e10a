//! Seed derivation and random streams.
//!
//! Every random consumer in the crate draws from a `ChaCha8Rng` whose key is
//! derived from the run seed by [`derive_seed`]. The derivation is
//! `splitmix64(splitmix64(seed ^ domain) ^ index)`, so each (domain, index)
//! pair owns an independent stream and adding replicas never changes the
//! streams of existing ones. ChaCha output is specified bit-for-bit, which
//! keeps environments and trajectories reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream domains. Values are part of the frozen stream layout.
pub mod domain {
    pub const ENVIRONMENT: u64 = 0x454e_5649;
    pub const DYNAMICS: u64 = 0x4459_4e41;
    pub const WALK: u64 = 0x5741_4c4b;
    pub const SAMPLING: u64 = 0x5341_4d50;
    pub const CHEMDIST: u64 = 0x4348_454d;
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ domain) ^ index)
}

pub fn stream(seed: u64, domain: u64, index: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, domain, index))
}

/// Uniform in [0, 1) with 53 random bits.
#[inline]
pub fn uniform(rng: &mut impl rand::RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
