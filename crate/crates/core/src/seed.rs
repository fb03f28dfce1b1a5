//! Deterministic seed fan-out.
//!
//! A root seed is split into per-component child seeds by mixing the root
//! with a 64-bit FNV-1a hash of a component tag through the SplitMix64
//! finalizer:
//!
//! ```text
//! child = splitmix64(root ^ fnv1a64(tag))
//! ```
//!
//! Streams are keyed by tag, so adding a component never perturbs the
//! streams of the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn fnv1a64(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `tag` under `root`.
pub fn child_seed(root: u64, tag: &str) -> u64 {
    splitmix64(root ^ fnv1a64(tag))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(root: u64, tag: &str) -> SimRng {
    rng_from_seed(child_seed(root, tag))
}
