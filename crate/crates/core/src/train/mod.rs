//! Training and inference orchestration.

pub mod ablation;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod flat;
pub mod imaging;
pub mod infer;
pub mod optim;
pub mod synth;
pub mod trainer;

pub use config::TrainConfig;
pub use optim::{poly_lr, Nesterov};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for item `stream` of a run seeded with `seed`, so
/// results do not depend on the order items are produced in.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}
