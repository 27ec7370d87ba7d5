//! Multimodal personalized prompting over a frozen encoder–decoder
//! transformer with trainable bottleneck adapters.
//!
//! The crate covers the full loop: corpus ingestion and synthesis, sub-word
//! tokenization with whole-word grouping, prompt rendering with image-token
//! expansion, a small reverse-mode autodiff graph, the backbone model with
//! per-sublayer adapters and an image-feature mapping network, training with
//! decoupled weight decay, constrained beam decoding, and ranking/text
//! evaluation metrics.

pub mod accounting;
pub mod cli;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod prompts;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
