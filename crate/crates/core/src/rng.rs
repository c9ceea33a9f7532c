//! Deterministic random streams.
//!
//! Every stochastic step owns an independent ChaCha8 stream derived from
//! `(global seed, domain, a, b)`, so results never depend on worker count
//! or evaluation order. Augmentation, for example, keys its stream by
//! `(seed, AUGMENT, epoch, sample index)`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Keep values stable: they are part of run reproducibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Init = 1,
    Split = 2,
    Shuffle = 3,
    Augment = 4,
    Mixup = 5,
    Synth = 6,
    Oversample = 7,
    Verify = 8,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent stream for `(seed, domain, a, b)`.
pub fn stream(seed: u64, domain: Domain, a: u64, b: u64) -> ChaCha8Rng {
    let mut s = splitmix64(seed);
    s = splitmix64(s ^ (domain as u64));
    s = splitmix64(s ^ a);
    s = splitmix64(s ^ b);
    ChaCha8Rng::seed_from_u64(s)
}
