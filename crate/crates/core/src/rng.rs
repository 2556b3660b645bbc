//! Named random substreams derived from one global seed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::fnv1a64;

/// Independent generator for `(seed, name)`. Changing one consumer's name or draw
/// count never perturbs another's stream.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut key = seed.to_le_bytes().to_vec();
    key.extend_from_slice(name.as_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a64(&key))
}

/// A child seed for APIs that take a plain `u64`.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    substream(seed, name).next_u64()
}
