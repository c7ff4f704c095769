//! Differentiable local feature selection (DLFS) for two-modality scene classification.
//!
//! Everything is hand-written `f64` math with explicit backward passes: a small tensor
//! type, layers, the keypoint selection mechanism, its training losses, a two-branch
//! network, a synthetic aligned-modality scene generator, and a deterministic trainer.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dlfs;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
