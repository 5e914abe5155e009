//! Tabular laboratory for entropy-modulated group policy optimization.
//!
//! The crate is organised bottom-up:
//!
//! - [`policy`]: autoregressive tabular softmax policy, exact and Monte-Carlo
//!   response entropies, checkpoint format.
//! - [`env`]: deterministic multi-turn environments with sparse outcome reward.
//! - [`rollout`]: trajectories, response spans and prompt groups.
//! - [`advantage`]: base response-level advantage estimators.
//! - [`aem`]: entropy-aware advantage modulation and its ablation variants.
//! - [`trainer`]: clipped surrogate losses, regularizers and the training loop.
//! - [`geometry`]: Fisher-Rao simplex tools and entropy-drift identities.
//! - [`probes`]: consistency, martingale and transition probes.

pub mod advantage;
pub mod aem;
pub mod env;
pub mod error;
pub mod geometry;
pub mod policy;
pub mod probes;
pub mod rollout;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};

use rand::SeedableRng;

/// Generator used everywhere a seeded stream is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
