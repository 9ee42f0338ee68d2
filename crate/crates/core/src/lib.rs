//! Multi-view fake audio detection.
//!
//! Three views of an utterance (discrete-unit durations, a frozen phoneme
//! recognizer's encoder states, and self-supervised-style frame embeddings)
//! are fused by cross-attention and scored by an LCNN-BiLSTM back-end.

pub mod checkpoint;
pub mod corpus;
pub mod detector;
pub mod dsp;
pub mod duration;
pub mod frame_encoders;
pub mod fusion;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod pipeline;
pub mod pron;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
