//! Personalized voice activity detection for streaming on-device use.
//!
//! The crate covers the full pipeline at desk scale:
//!
//! - [`frontend`]: 16 kHz PCM to stacked log-mel features, offline or chunked.
//! - [`layers`]: forward/backward layer primitives and a gradient checker.
//! - [`model`]: streaming conformer backbone with four speaker-conditioning
//!   variants (input concat, FiLM on the embedding, a speaker pre-net with
//!   cosine scores, or both) and a 3-class frame classifier.
//! - [`datagen`]: deterministic synthetic corpora, concatenated multi-speaker
//!   examples, the zero-embedding training paradigm, SpecAugment-style masks.
//! - [`trainer`]: cross-entropy training and frame-level evaluation.
//! - [`quant`]: int8 dynamic-range weight quantization.
//! - [`stream`]: chunked inference sessions that gate target-speaker frames.
//! - [`container`]: the serialized model format.
//!
//! Data-parallel inner loops use rayon when the `parallel` feature (default)
//! is enabled; the sequential fallback is bit-identical.

pub mod container;
pub mod datagen;
pub mod error;
pub mod frontend;
pub mod layers;
pub mod model;
mod parallel;
pub mod quant;
pub mod stream;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
