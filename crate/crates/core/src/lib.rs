//! Desk-scale audio-language model workbench.
//!
//! Everything needed to train and evaluate a small instruction-following
//! audio-language model on a single machine:
//!
//! - [`tensor`]: dense f64 matrices with tape-based reverse-mode
//!   differentiation, a named parameter store, Adam, and a finite-difference
//!   gradient checker.
//! - [`frontend`]: WAV decoding, log-mel spectrograms, and spectrogram
//!   patchification.
//! - [`encoder`] / [`aggregator`]: a patch transformer exposing per-layer
//!   features, and the two-block network fusing middle layers into the last.
//! - [`qformer`]: the fixed-size query bottleneck with its contrastive,
//!   matching, and generation objectives.
//! - [`decoder`] / [`assembly`]: a byte-level causal decoder with low-rank
//!   adapters, soft-prompt construction, full-model wiring, and the staged
//!   training schedule.
//! - [`synthesis`]: seeded instruction-data generation against a pluggable
//!   text-generation client, with rule-based filtering.
//! - [`eval`]: retrieval metrics and model-as-judge scoring.
//! - [`checkpoint`] / [`config`]: named-tensor archives and flat key=value
//!   run configuration.

pub mod aggregator;
pub mod assembly;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod nn;
pub mod qformer;
pub mod synthesis;
pub mod tensor;

pub use error::{Error, Result};
