//! Decoding, grounding, retrieval and zero-shot classification over a frozen
//! model.

mod decode;
mod index;

pub use decode::{
    generate, generate_batch, generate_with_prefix, ground, ground_batch, ground_unrestricted, prefix_with_text,
    repair_box, task_prefix, teacher_forced_agreement, zero_shot_batch, zero_shot_classify, Generation,
    GroundingDecode,
};
pub use index::{retrieve, EmbeddingIndex, Hit};
