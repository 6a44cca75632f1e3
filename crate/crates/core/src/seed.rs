//! Sub-seed derivation: one top-level seed feeds every stage through
//! independent ChaCha streams, so any stage can be rerun on its own.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named streams. The discriminants are part of the on-disk reproducibility
/// contract; do not renumber.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Simulate = 1,
    Anchors = 2,
    Chain = 3,
    Clustering = 4,
    Pairs = 5,
}

/// Deterministic sub-seed for `(seed, stream, index)`.
pub fn derive(seed: u64, stream: Stream, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
