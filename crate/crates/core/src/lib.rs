//! Prior-noise-aware preference optimization (PNAPO) for rectified-flow
//! models, at a scale that fits on a laptop.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: a small tanh MLP with hand-written backprop, a
//!   finite-difference gradient oracle, AdamW and the binary checkpoint
//!   format.
//! - [`rectflow`]: straight-line interpolation, conditional flow matching,
//!   the Euler sampler and the toy conditional Gaussian mixture.
//! - [`corpus`]: prompt filtering, deduplication and cluster-balanced
//!   resampling over tabular prompt records.
//! - [`prefdata`]: noise-tracked preference pairs, synthetic rewards and the
//!   dataset file format.
//! - [`pnapo`]: the interpolation score, the PNAPO loss, dynamic
//!   regularization and the shared alignment trainer.
//! - [`baselines`]: Diffusion-DPO (velocity form) and SFT objectives.
//! - [`analytics`]: exact KL enumeration on tabular chains, estimator
//!   variance, reward evaluation and win rates.
//! - [`config`]: the flat `key = value` run configuration.

pub mod analytics;
pub mod baselines;
pub mod config;
pub mod corpus;
mod error;
pub mod numerics;
pub mod pnapo;
pub mod prefdata;
pub mod rectflow;

pub use error::{Error, Result};
pub use numerics::{MlpSpec, Model, ParamVector, VelocityField};
pub use pnapo::{BetaSchedule, Method};
pub use prefdata::PreferenceRecord;

/// Deterministic random stream used everywhere a seed appears.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Builds the seeded stream for `seed`.
pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::Digest;
    hex::encode(sha2::Sha256::digest(bytes))
}
