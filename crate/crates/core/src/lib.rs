//! Toolkit for noise-robust language modelling over parallel ASR transcripts
//! and phoneme sequences.

pub mod batcher;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod study;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
