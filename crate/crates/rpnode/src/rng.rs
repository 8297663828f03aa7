//! Stateless seed derivation. All randomness in the crate flows from a base
//! seed plus a list of role/index tags, so any episode, noise draw or attack
//! start can be reproduced in isolation without replaying a shared stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Role tags keep derivations for different purposes from colliding even when
/// their numeric indices coincide.
pub mod role {
    pub const EPISODE: u64 = 1;
    pub const NOISE_SUPPORT: u64 = 2;
    pub const NOISE_QUERY: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const ATTACK: u64 = 5;
    pub const INIT_ENCODER: u64 = 6;
    pub const INIT_DYNAMICS: u64 = 7;
    pub const PGD_START: u64 = 8;
    pub const SYNTH_SUBJECT: u64 = 9;
    pub const SYNTH_SLICE: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with tags into a new seed. Order-sensitive.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(base ^ 0x9E37_79B9_7F4A_7C15);
    for &t in tags {
        s = splitmix64(s.wrapping_add(splitmix64(t.wrapping_add(0xD1B5_4A32_D192_ED03))));
    }
    s
}

pub fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
