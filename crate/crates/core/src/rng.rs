//! Seed derivation and per-stream generators.
//!
//! Every random quantity in the crate is drawn from a [`ChaCha8Rng`] whose
//! key comes from a 64-bit seed and whose stream id selects an independent
//! sub-sequence. Two draws with the same `(seed, stream)` pair are identical
//! on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a sequence of words.
pub fn hash64(parts: &[u64]) -> u64 {
    parts.iter().fold(GOLDEN_GAMMA, |acc, &p| {
        mix64(acc.wrapping_add(GOLDEN_GAMMA) ^ mix64(p.wrapping_add(GOLDEN_GAMMA)))
    })
}

/// Seed of replication `rep` at sample size `n` in a campaign with base seed `base`.
pub fn replication_seed(base: u64, n: usize, rep: usize) -> u64 {
    hash64(&[base, n as u64, rep as u64])
}

/// Generator for stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
