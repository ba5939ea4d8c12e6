//! Generative Gram-matrix texture toolkit.
//!
//! The pipeline has three stages:
//!
//! 1. A recursive Wasserstein auto-encoder is trained on multi-level Gram
//!    matrices extracted from textured image regions ([`feature`], [`transform`],
//!    [`wae`], [`training`]).
//! 2. A Gaussian mixture is fitted to the latent codes of the training set
//!    ([`gmm`]).
//! 3. Latent codes sampled from the mixture are decoded into Gram sets, and
//!    texture images are rendered from them by pixel optimization
//!    ([`synthesis`]).
//!
//! [`eval`] holds corpus handling, FID, latent embeddings and retrieval;
//! [`pipeline`] wires the stages to files the way the CLI uses them.

pub mod container;
pub mod error;
pub mod eval;
pub mod feature;
pub mod gmm;
pub mod linalg;
pub mod nn;
pub mod pipeline;
pub mod registry;
pub mod synthesis;
pub mod training;
pub mod transform;
pub mod wae;

pub use error::{Error, Result};
