//! Multiway transformer encoder that handles image-conditioned text generation
//! (captioning, VQA, grounding through coordinate tokens) and contrastive
//! image-text retrieval with a single set of weights.

pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod seed;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
