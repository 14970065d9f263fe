//! Barge-in verification toolkit.
//!
//! Classifies user speech in a spoken-dialogue turn as a true or false
//! barge-in directly from audio plus dialogue context (bot prompt text and a
//! categorical dialogue-context label), and implements a lexical-infusion
//! pretraining stage that teaches the speech encoder to predict text-encoder
//! word embeddings at word-end frames. Ships with a synthetic corpus
//! generator, an audio-only LSTM baseline, metrics, and a batch-1 latency
//! harness.

pub mod autodiff;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod datagen;
pub mod encoders;
pub mod eval;
pub mod fusion;
pub mod infusion;
pub mod nn;
pub mod tensor;

use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
