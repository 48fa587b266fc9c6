//! corvit: a small-image classification stack built from a convolutional
//! feature extractor and a transformer encoder, with per-finding attention
//! pooling, saliency rendering, threshold-based evaluation, and a synthetic
//! data generator for end-to-end verification. Everything runs on dense f64
//! tensors with tape-based reverse-mode autodiff; all randomness is seeded
//! and all computation is single-threaded, so runs are byte-reproducible.

pub mod backbone;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod preprocess;
pub mod relevance;
pub mod synth;
pub mod training;
pub mod transformer;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
