//! Counter-based random streams derived from one run seed.
//!
//! Every consumer gets its own ChaCha stream id, and an index within that
//! stream selects a disjoint block of the keystream, so e.g. the augmentation
//! of batch 17 does not depend on how many numbers initialization consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Augment = 3,
    Batches = 4,
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.set_word_pos(u128::from(index) << 40);
    rng
}
