//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit `seed` plus a list of integer
//! keys (chain index, draw index, grid index, ...). The keys are folded into a
//! 256-bit ChaCha key with SplitMix64, so sibling streams are independent and
//! a result never depends on the order in which tasks were scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type StreamRng = ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit sub-seed from a root seed and a key path.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &k in keys {
        state ^= k.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(acc);
        acc = splitmix64(&mut state);
    }
    acc
}

/// Open the stream identified by `(seed, keys)`.
pub fn stream_rng(seed: u64, keys: &[u64]) -> StreamRng {
    let mut state = derive_seed(seed, keys);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
