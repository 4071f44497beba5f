//! Derived random streams.
//!
//! Every random draw in a run comes from a ChaCha stream whose seed is a
//! function of the master seed, a purpose tag and a short coordinate path
//! (task index, trial, step, sample, ...). Streams never depend on the
//! order in which workers execute, so results are identical at any worker
//! count and any single branch can be replayed from its recorded seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    TaskGen = 1,
    Demo = 2,
    Collect = 3,
    Expert = 4,
    PrmPolicy = 5,
    PrmAlternative = 6,
    Branch = 7,
    Eval = 8,
    Bon = 9,
    Proposal = 10,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of the stream at `(master, purpose, path)`.
pub fn derive_seed(master: u64, purpose: Purpose, path: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ 0x5EED_0000_0000_0000);
    h = splitmix64(h ^ purpose as u64);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0xA5A5)));
    }
    h
}

pub fn stream_from_seed(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(master: u64, purpose: Purpose, path: &[u64]) -> Stream {
    stream_from_seed(derive_seed(master, purpose, path))
}

/// 64-bit FNV-1a over a sequence of words; stable across platforms and
/// toolchains, used for state digests.
pub fn fnv1a(words: impl IntoIterator<Item = u64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}
