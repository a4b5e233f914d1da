//! Multiway transformer: shared attention with per-modality feed-forward
//! experts, a cross-encoder path for generation and a dual-encoder path for
//! retrieval.

mod checkpoint;
mod config;
mod forward;
pub mod gradcheck;
mod mask;
mod params;

pub use checkpoint::{Checkpoint, Entry, CONFIG_ENTRY};
pub use config::{ModelConfig, Pooling};
pub use forward::{route, CrossInput, Graph, Modality, Mode};
pub use mask::build_generation_mask;
pub use params::{Expert, Model, INIT_TAU, MIN_TAU};
