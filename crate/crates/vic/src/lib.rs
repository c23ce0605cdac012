//! Desk-scale testbed for voice-impression-controlled synthesis.
//!
//! The crate builds a fully synthetic, differentiable "voice world" whose
//! utterances carry known 11-dimensional impression vectors, trains a small
//! backbone (feature encoder, style-token layer, decoder, rate head) on it,
//! and then compares three ways of injecting a target impression into the
//! speaker-embedding path:
//!
//! - `base`   — single reference utterance feeds both identity and target
//!   impression, with dropout and a gradient-reversal head fighting leakage,
//! - `sep`    — identity comes from a second utterance of the same speaker,
//! - `rfg`    — the reference is replaced by Gaussian noise entirely.
//!
//! Evaluation measures how much of the reference's inherent impression
//! leaks into the output (VI-MSE / RVI-MSE and their gap), how responsive
//! each variant is to commanded impression offsets (modulation slopes),
//! and how well speaker identity survives (cosine similarity of a speaker
//! probe). A separate module provides annotation analytics for Likert-style
//! impression corpora: Krippendorff's alpha, inter-scale correlations,
//! objective speaking-rate scaling, and similarity-based label propagation.
//!
//! See the `examples/` directory for one runnable program per capability,
//! and the `vic` binary for the staged experiment pipeline.

pub mod backbone;
pub mod cli;
pub mod control;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod nnet;
pub mod synthworld;
pub mod types;

pub use error::{Result, VicError};
pub use types::{Dims, FeatureSeq, ImpressionVector, VI_DIMS};
