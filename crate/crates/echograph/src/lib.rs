//! Estimation of ejection fraction from periodic grayscale videos with a
//! latent frame graph.
//!
//! The pipeline encodes each video clip into per-frame embeddings with a
//! residual 3-D convolutional encoder, infers a complete weighted graph over
//! the frames (edge and node importance weights) by message passing, and
//! regresses the ejection fraction by propagating frame embeddings through
//! graph-convolution layers and pooling them with the learned node weights.
//! The node weights double as an explanation: on well-behaved inputs they
//! localize the end-systole/end-diastole segment of the cardiac cycle, and
//! their spread flags samples that need expert review.
//!
//! Everything is built from scratch on a small reverse-mode autodiff engine
//! ([`tensor`]), trains on CPU with a synthetic pulsating-ellipse dataset
//! ([`synth`]) carrying analytic labels, and is exercised end to end by the
//! `echograph` command-line binary.

pub mod attention;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod regressor;
pub mod sampling;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Deterministic, seedable RNG used across the crate.
pub type Rng = rand_chacha::ChaCha20Rng;
