//! Multilingual image-caption generation with a single LSTM decoder whose
//! output language is selected by an artificial start token (`<en>`, `<jp>`,
//! ...).
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff engine,
//! vocabulary handling, the decoder, Adam training, beam search, BLEU/CIDEr
//! scoring, dataset and checkpoint formats, and the `mlcap` command line.

pub mod autodiff;
pub mod beam;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
