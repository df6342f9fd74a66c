//! Deterministic random streams.
//!
//! Every consumer owns its stream; streams are never shared. A replica's
//! stream is a ChaCha8 generator keyed by a SplitMix64 expansion of
//! `(master_seed, replica_index)`, so replica i is reproducible in isolation
//! and independent of how work is scheduled across workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One SplitMix64 step: advances `state` and returns the next output word.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the stream key for a replica.
///
/// The master seed and the replica index are mixed into a single SplitMix64
/// state (the index is pre-scrambled by the golden-ratio constant so that
/// adjacent indices land far apart), then four output words form the 256-bit
/// ChaCha key.
pub fn replica_key(master_seed: u64, replica_index: u64) -> [u8; 32] {
    let mut state = master_seed ^ (replica_index.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // burn one word so that state and first output decorrelate
    let _ = splitmix64(&mut state);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

/// The random stream for replica `replica_index` under `master_seed`.
pub fn replica_rng(master_seed: u64, replica_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(replica_key(master_seed, replica_index))
}

/// A stream for auxiliary consumers (bootstrap resampling, Monte-Carlo
/// moment checks) that must not collide with replica streams. `purpose` is a
/// fixed per-consumer tag.
pub fn aux_rng(master_seed: u64, purpose: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(replica_key(master_seed ^ 0xA5A5_A5A5_A5A5_A5A5, purpose))
}
