//! Counter-based substream derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by
//! `(seed, domain, a, b)` through a SplitMix64 mix. Streams are independent
//! of evaluation order, so parallel code can draw per-particle noise without
//! sharing generator state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep unrelated consumers of the same user seed apart.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    Step = 2,
    DataTrain = 3,
    DataTest = 4,
    Sample = 5,
    Arm = 6,
    Shuffle = 7,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the ChaCha8 generator for substream `(seed, domain, a, b)`.
pub fn substream(seed: u64, domain: Domain, a: u64, b: u64) -> ChaCha8Rng {
    let mut state = seed;
    let mut key = [0u8; 32];
    let words = [
        splitmix64(&mut state),
        splitmix64(&mut state) ^ (domain as u64).wrapping_mul(0xd6e8_feb8_6659_fd93),
        splitmix64(&mut state) ^ a.wrapping_mul(0xa076_1d64_78bd_642f),
        splitmix64(&mut state) ^ b.wrapping_mul(0xe703_7ed1_a0b4_28db),
    ];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        // one extra mix round so (a, b) diffuse into the full key
        let mut s = w;
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
