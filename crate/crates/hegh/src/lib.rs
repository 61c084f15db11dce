//! Deep-hashing toolkit that learns compact binary codes for image retrieval.
//!
//! The pipeline: a small attention-augmented CNN maps images to a binary-like
//! vector and per-class probabilities; training pulls similar pairs together
//! and pushes dissimilar pairs apart, reweighting each pair by how hard the
//! classifier finds its examples; codes are quantized by sign, indexed, and
//! ranked by Hamming distance; retrieval quality is reported as MAP,
//! Precision@k, and precision within Hamming radius 2.

pub mod data;
pub mod error;
pub mod eval;
pub mod hash;
pub mod labels;
pub mod loss;
pub mod network;
pub mod parallel;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
