//! Frequency-band image serialization with a selective state-space classifier.
//!
//! The pipeline turns an image into a causal token sequence by decomposing it
//! into cumulative low-frequency bands (2D DCT, anti-diagonal frequency
//! thresholds), downsampling each band to a band-specific grid, embedding the
//! grids with a shared patch stem, and concatenating the token blocks from
//! coarse to fine with a trailing class token. A stack of selective
//! state-space blocks consumes the sequence and a linear head classifies from
//! the class-token state.
//!
//! Module map:
//! - [`spectral`]: DCT, frequency indexing, band masks, band decomposition.
//! - [`serialization`]: band grids, downsampling, patch embedding, token
//!   sequence assembly.
//! - [`ssm`]: single-precision selective-scan reference kernels (sequential
//!   and work-efficient parallel forms).
//! - [`autodiff`]: tape-based reverse-mode differentiation used by the model
//!   and trainer.
//! - [`model`]: block/stack assembly, presets, checkpoints.
//! - [`train`]: datasets, optimizer, schedule, training/eval loops, gradient
//!   checking, ablations.
//! - [`pgm`]: minimal PGM/PPM codec.

pub mod autodiff;
pub mod error;
pub mod model;
pub mod pgm;
pub mod serialization;
pub mod spectral;
pub mod ssm;
pub mod train;

pub use error::{Error, Result};

/// Library crate version, embedded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
