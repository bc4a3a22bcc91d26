//! Anticipation captioning at desk scale.
//!
//! Builds a commonsense knowledge graph from detected and forecasted
//! concepts, enriches the concept embeddings with a graph attention
//! network, and injects them as a learned prompt into a frozen toy
//! vision-language decoder that emits a caption for an unseen future
//! image.

pub mod captioner;
pub mod checkpoint;
pub mod conceptnet;
pub mod concepts;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod gat;
pub mod kg;
pub mod params;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
