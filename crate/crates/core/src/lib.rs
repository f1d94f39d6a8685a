//! Continual learning with a shared linear feature map.
//!
//! The crate has two halves. The first trains a feature matrix `U` and one
//! linear prompt per task with doubly projected gradient descent (updates to
//! `U` are confined to the orthogonal complement of both the committed column
//! span and the committed row span), so predictions on earlier tasks never
//! move. The second evaluates a two-environment game over a quadratic-kernel
//! convolutional model with exact polynomial moments over the unit ball, and
//! searches for a proper learner that beats the 1/1000 error bar.
//!
//! Module map:
//! - [`linalg`]: orthonormal subspaces, projections and singular-value bounds.
//! - [`factorization`]: the per-task DPGrad loop on the matrix factorization
//!   objective, plus diagnostics (`decompose`, `loss_components`).
//! - [`environments`]: grid-exact synthetic instances and sampled data.
//! - [`learner`]: the k-task driver, run reports and forgetting metrics.
//! - [`baselines`]: naive fine-tuning without projections.
//! - [`lowerbound`]: quadratic polynomials, ball moments and the adversary game.
//! - [`report`]: instance, checkpoint, trace and summary file formats.

pub mod baselines;
pub mod environments;
pub mod error;
pub mod factorization;
pub mod learner;
pub mod linalg;
pub mod lowerbound;
pub mod report;

pub use error::{Error, Result};

use rand::SeedableRng;

/// Random source used everywhere a seed must reproduce a run bit for bit.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's deterministic generator from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
