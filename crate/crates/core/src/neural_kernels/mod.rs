//! Numeric substrate: tensors, parameters and the differentiable operations
//! the model is built from. Every operation has a hand-written backward pass;
//! [`gradcheck`] verifies them against central finite differences.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod gru;
pub mod ops;
mod tensor;

use thiserror::Error;

pub use adam::{adam_update, Adam};
pub use gru::{gru_step, GruCache, GruWeights};
pub use ops::{
    cross_entropy, dropout, linear, linear_backward, softmax, softmax_backward, softmax_cross_entropy, LinearGrads,
};
pub use tensor::{ParamSet, Parameter, Tensor};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Deterministic RNG used throughout the crate.
pub type Rng64 = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng64 {
    use rand::SeedableRng;
    Rng64::seed_from_u64(seed)
}
