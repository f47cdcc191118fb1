//! Seed-derived deterministic random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by the run
//! seed and a fixed stream id, so adding a consumer never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const STREAM_PARAM_INIT: u64 = 1;
pub const STREAM_EMBED_COLLECT: u64 = 2;
pub const STREAM_KMEANS: u64 = 3;
pub const STREAM_RANDOM_INIT: u64 = 4;
pub const STREAM_EVAL_SUBSAMPLE: u64 = 5;
/// Per-epoch shuffles use `STREAM_SHUFFLE_BASE + epoch`.
pub const STREAM_SHUFFLE_BASE: u64 = 1 << 32;

pub fn stream(seed: u64, stream_id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Stream keyed by an arbitrary tuple of words (e.g. seed, component, point).
pub fn keyed(words: &[u64]) -> StreamRng {
    let mut key = [0u8; 32];
    for (i, w) in words.iter().take(4).enumerate() {
        key[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
