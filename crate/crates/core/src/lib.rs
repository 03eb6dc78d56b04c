//! Core numerics for dual-branch stereo disparity learning with a
//! continuous mean-field CRF that fuses generator disparities and
//! discriminator score maps.
//!
//! The crate is `no_std` and only needs `alloc`. Everything that touches
//! the filesystem (image codecs, checkpoints, configs, the CLI) lives in
//! the `dgcrf` companion crate.
//!
//! Layout:
//!
//! - [`tensor`], [`graph`], [`gradcheck`]: dense tensors and a reverse-mode tape.
//! - [`warp`]: differentiable horizontal bilinear view synthesis.
//! - [`crf`]: kernel bank, energy, mean-field layer, exact solver, coupling.
//! - [`networks`]: generators, hallucinator, pixel-level discriminators.
//! - [`objectives`]: reconstruction, adversarial, hallucination, CRF losses.
//! - [`trainer`]: SGD with momentum, learning-rate schedule, one training step.
//! - [`data`]: synthetic rectified stereo pairs and batch ordering.
//! - [`metrics`]: depth error and accuracy metrics.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod crf;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod metrics;
pub mod networks;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use rng::Rng;
pub use tensor::Tensor;
