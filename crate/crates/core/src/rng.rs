//! Deterministic random streams.
//!
//! Every consumer gets its own ChaCha8 stream keyed by `(seed, stream)`, so
//! results do not depend on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64, stream_id: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Stream ids reserved for the optimizer; trial streams use small ids.
pub const OPTIMIZER_STREAM: u64 = u64::MAX;
