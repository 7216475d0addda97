//! Desk-scale facial makeup transfer on fully synthetic data.
//!
//! The pipeline has two training stages over a procedurally generated face
//! corpus: (1) a makeup style encoder fine-tuned with self-supervised and
//! image-text contrastive objectives; (2) identity- and region-aware makeup
//! injection into a small text-conditioned diffusion denoiser, driven by
//! learnable region queries, an attention alignment loss, LoRA adapters and
//! a zero-initialized identity conditioning branch. Region-specific transfer
//! mixes per-region embeddings from several reference images.
//!
//! Everything is deterministic given a seed, and every numeric claim is
//! checkable against exact synthetic ground truth.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod evalsuite;
pub mod imageio;
pub mod inject;
pub mod oracle;
pub mod pairs;
pub mod pipeline;
pub mod regional;
pub mod styleenc;
pub mod synthface;

pub use error::{Error, Result};
