//! Training MLPs and LSTMs on inputs with missing values by re-weighting the
//! encoding-layer gradient with learned per-feature importance.

pub mod config;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod gil;
pub mod linalg;
pub mod metrics;
pub mod missingness;
pub mod models;
pub mod optim;
pub mod rl;
pub mod synthetic;

pub use error::{GilError, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream `stream` derived from `seed`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
