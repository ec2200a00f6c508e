use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Name of the generator recorded in checkpoint headers.
pub const RNG_ALGORITHM: &str = "chacha8";

/// Enough to replay an initialization: algorithm, seed and stream id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngRecord {
    pub algorithm: String,
    pub seed: u64,
    pub stream: u64,
}

impl RngRecord {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngRecord {
            algorithm: RNG_ALGORITHM.to_string(),
            seed,
            stream,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        seeded(self.seed, self.stream)
    }
}

/// Deterministic generator for `(seed, stream)`.
pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Well-known stream ids so independent consumers of one seed never overlap.
pub mod streams {
    pub const MODEL_INIT: u64 = 1;
    pub const HEAD_INIT: u64 = 2;
    pub const ADAPTER_INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const CORPUS_TRAIN: u64 = 5;
    pub const CORPUS_EVAL: u64 = 6;
    pub const CIPHER: u64 = 7;
    pub const MARKOV: u64 = 8;
}
