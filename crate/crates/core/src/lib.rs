//! Task-aware prompt routing.
//!
//! The pipeline discovers latent task types from prompts and their
//! per-model quality scores, trains a classifier that maps prompts to those
//! types, trains a mixture-of-experts quality estimator with one head per
//! (task, candidate model), and routes each new prompt to one model of the
//! pool, optionally trading quality for cost.

pub mod artifact;
pub mod classifier;
pub mod config;
pub mod data;
pub mod discovery;
pub mod error;
pub mod inference;
pub mod neural;
pub mod pipeline;
pub mod rank;
pub mod router;
pub mod synth;

pub use artifact::{load_artifact, save_artifact, Artifact};
pub use config::PipelineConfig;
pub use data::{load_dataset, split_dataset, Dataset, ModelCard, PromptRecord, SplitRatios};
pub use error::{Error, Result};
pub use rank::{rbo, rrf_fuse, RankedList};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic generator for one named use of the run seed.
///
/// Distinct labels give independent streams, so adding a new consumer of
/// randomness never perturbs the existing ones.
pub fn seeded_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
