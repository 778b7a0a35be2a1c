//! Set-encoder re-ranking: a cross-encoder that scores a set of passages in
//! one forward pass, with passage interactions that do not depend on the
//! input order.
//!
//! - [`numerics`]: tensors, reverse-mode autodiff, AdamW, checkpoints
//! - [`tokenize`]: word vocabulary and per-passage input layout
//! - [`encoder`]: transformer with inter-passage attention and scoring heads
//! - [`losses`]: InfoNCE, RankNet and their duplicate/novelty-aware variants
//! - [`novelty`]: near-duplicate clustering and duplicate injection
//! - [`metrics`]: nDCG@k and α-nDCG@k
//! - [`harness`]: synthetic data, training, re-ranking and diagnostics

pub mod encoder;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod novelty;
pub mod numerics;
pub mod tokenize;

pub use error::{Error, Result};
