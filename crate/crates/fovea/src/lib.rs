//! Scale-selective high-resolution vision encoding.
//!
//! A high-res image is expensive to encode wholesale: transformer cost grows
//! quartically with resolution. This crate implements a three-stage
//! alternative. Stage 1 encodes a global low-resolution view with a small
//! vision transformer, recording per-layer keys/values. Stage 2 scores every
//! patch position of a multi-scale pyramid for relevance to a prompt (a text
//! embedding, or a learned saliency vector for prompt-free selection). Stage 3
//! re-encodes only the top-k scoring patches, attending over the cached
//! low-res keys/values so local features keep global context. High-res
//! compute then depends on the patch budget, not the image resolution.
//!
//! The crate also ships everything needed to train and study the mechanism
//! at desk scale: a reverse-mode autodiff core with a finite-difference
//! verifier, a sigmoid-contrastive pre-training loop with box-supervised
//! selection losses, a synthetic scene/document generator with exact region
//! ground truth, a saliency-based box curation pipeline over ingested masks,
//! and a cost/scaling harness with analytic FLOP accounting.
//!
//! Start with the runnable examples (`cargo run --release --example ...`):
//! each one exercises a major capability end to end. The `fovea` binary
//! exposes the same pipeline as subcommands (`synth`, `curate`, `pretrain`,
//! `select`, `bench`).

pub mod cli;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod geom;
pub mod gradcheck;
pub mod harness;
pub mod pretrain;
pub mod pyramid;
pub mod raster;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{top_k, Tensor, TopK};
