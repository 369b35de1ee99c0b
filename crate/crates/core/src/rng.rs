//! Seeded, splittable random streams.
//!
//! Every replicate `k` of an ensemble draws from its own ChaCha stream keyed by
//! `(master_seed, k)`, so an ensemble is identical whether it is generated
//! serially or across any number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn stream(master_seed: u64, k: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(k);
    rng
}
