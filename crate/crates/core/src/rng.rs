//! Seed fan-out. One user seed drives every stochastic component through a
//! fixed per-component stream so each stage is reproducible on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod stream {
    pub const CORPUS_TEMPLATES: u64 = 1;
    pub const CORPUS_UTTERANCES: u64 = 2;
    pub const TOY_W2V: u64 = 10;
    pub const TOY_HUBERT: u64 = 11;
    pub const KMEANS: u64 = 20;
    pub const PRON_INIT: u64 = 30;
    pub const PRON_DATA: u64 = 31;
    pub const DETECTOR_INIT: u64 = 40;
    pub const DETECTOR_DATA: u64 = 41;
    pub const SPLIT: u64 = 50;
}

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
