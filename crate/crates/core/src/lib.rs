//! Active retrieval-augmented inference for vision-language models.

pub mod adapters;
pub mod config;
pub mod domain;
pub mod error;
pub mod eval;
pub mod exec;
pub mod fusion;
pub mod index;
pub mod pipeline;
pub mod rerank;
pub mod retriever;
pub mod synth;
pub mod trigger;

pub use error::{Error, Result};
