//! Normalized convex fusion of multi-layer text-encoder features for a
//! flow-matching diffusion transformer, at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, the reverse-mode tape and the gradient oracle
//! - [`encoder_sim`]: the synthetic layered text encoder and target data
//! - [`routing`]: the six fusion strategies and the convex fusion itself
//! - [`backbone`]: the cross-attention DiT and its checkpoint format
//! - [`flowmatch`]: training (loss, AdamW) and the guided Euler sampler
//! - [`analysis`]: fusion-weight statistics and trajectory diagnostics
//! - [`cli`]: run configuration and the command-line surface

pub mod analysis;
pub mod backbone;
pub mod cli;
pub mod encoder_sim;
pub mod error;
pub mod flowmatch;
pub mod numerics;
pub mod routing;

pub use error::{Error, Result};
