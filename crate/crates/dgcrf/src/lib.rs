//! File formats, training runs and command bodies on top of `dgcrf-core`.
//!
//! - [`pnm`]: 8-bit PPM/PGM images and 16-bit disparity maps.
//! - [`checkpoint`]: bit-exact binary model snapshots.
//! - [`config`]: sectioned `key = value` run configuration.
//! - [`manifest`]: tab-separated stereo pair lists and dataset loading.
//! - [`fit`]: training with checkpoints, loss log, run manifest and resume.
//! - [`report`]: metric reports as JSON and CSV.
//! - [`commands`]: inference, evaluation and self-checks used by the CLI.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod fit;
pub mod hash;
pub mod manifest;
pub mod pnm;
pub mod report;

pub use error::{Error, Result};
