//! Deterministic keyed random-number streams.
//!
//! Every stochastic routine in the library derives its generator from a root
//! seed plus a tag path, e.g. `(seed, [epoch, batch, sample])` in training or
//! `(seed, [row])` in sampling. Streams are independent of thread scheduling,
//! so parallel execution cannot change any draw.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// 64-bit FNV-1a over a byte slice. Used for content hashes in manifests and
/// panel sidecars; not cryptographic.
pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha stream from `(seed, tags...)`.
///
/// The tag path is hashed into a 256-bit key, so streams with different paths
/// are unrelated while identical paths reproduce bit-identical draws.
pub fn keyed_rng(seed: u64, tags: &[u64]) -> ChaCha12Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut absorb = |w: u64| {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    absorb(seed);
    absorb(tags.len() as u64);
    for &t in tags {
        absorb(t);
    }
    let mut state = h;
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}
