//! Knowledge-enriched visual-linguistic transformer.
//!
//! Commonsense facts are injected next to the words they anchor, positions are
//! renumbered so the original sentence is unchanged, and a visible matrix keeps
//! injected tokens from leaking into unrelated parts of the sequence.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod embedding;
pub mod gradcheck;
pub mod encoder;
pub mod error;
pub mod kb;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod task;
pub mod train;

pub use error::{Error, Result};
