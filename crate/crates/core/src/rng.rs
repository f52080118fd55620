//! Seed derivation and the counter-based generator behind the codebook.
//!
//! Every pseudorandom object in the scheme is a pure function of a 64-bit
//! seed and a small tuple of counters, so any entry can be regenerated in
//! O(1) without materializing matrices and results do not depend on the
//! order in which trials or sequences are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags separating independent streams derived from one seed.
pub mod domain {
    pub const DICTIONARY: u64 = 0x5350_5245_4144_0001;
    pub const FROZEN: u64 = 0x4652_4f5a_454e_0002;
    pub const SUPPORT: u64 = 0x5355_5050_4f52_0003;
    pub const NOISE: u64 = 0x4e4f_4953_4500_0004;
    pub const TRIAL: u64 = 0x5452_4941_4c00_0005;
    pub const ENSEMBLE: u64 = 0x454e_5345_4d42_0006;
}

/// SplitMix64 output function applied to `x`.
#[inline]
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based pseudorandom function of `(seed, domain, a, b, c)`.
#[inline]
pub fn prf(seed: u64, domain: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut h = splitmix64(seed ^ domain);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    splitmix64(h ^ c)
}

/// Stable per-trial seed from the master seed and the trial index.
pub fn trial_seed(master_seed: u64, trial_index: u64) -> u64 {
    prf(master_seed, domain::TRIAL, trial_index, 0, 0)
}

/// A ChaCha stream keyed by `(seed, domain, index)`.
pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(prf(seed, domain, index, 0, 0))
}
