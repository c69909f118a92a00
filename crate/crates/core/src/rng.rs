//! Named, index-addressed RNG substreams.
//!
//! Every random decision in a run is drawn from its own ChaCha8 stream,
//! derived from `(master_seed, label, indices)`. Streams are independent of
//! evaluation order and of worker count: two sites that derive the same
//! `(seed, label, indices)` triple see the same stream, and consuming one
//! stream never advances another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::digest::Fnv64;

/// Derive the 64-bit seed for a named substream.
pub fn substream_seed(master: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = Fnv64::new();
    h.update_u64(master);
    h.update(label.as_bytes());
    for &i in indices {
        h.update_u64(i);
    }
    h.finish()
}

/// Open the named substream as a ChaCha8 generator.
pub fn substream(master: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(master, label, indices))
}
