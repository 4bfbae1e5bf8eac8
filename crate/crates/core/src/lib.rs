//! Multi-hypothesis quality estimation for grammatical error correction.
//!
//! The crate builds a fully connected reasoning graph over the
//! ⟨source, hypothesis⟩ pairs produced by a correction system, propagates
//! evidence between them with two attention mechanisms, and scores every
//! token and hypothesis. Around that model sit the supporting pieces: edit
//! extraction and token labeling, a small transformer encoder, a trainer,
//! evaluation metrics, a Coordinate Ascent reranker, and a synthetic corpus
//! generator.

pub mod annotator;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod group;
pub mod head;
pub mod metrics;
pub mod model;
pub mod reranker;
pub mod synthdata;
pub mod textpipe;
pub mod trainer;

pub use error::{Error, Result};
