//! Synthetic scenes, task sequences, masking, and batching.

mod batch;
pub mod dataset;
mod image;
mod masking;
mod sample;
pub mod scene;

pub use batch::{make_batches, Batch};
pub use dataset::{
    build_samples, class_prompt, generate_split, held_out_samples, lexicon, load_split, write_split, ManifestRecord,
    SampleOptions, SceneEntry, Split, DESK_VQA_PER_SCENE,
};
pub use image::Image;
pub use masking::{apply_mask, MaskedSequence, DEFAULT_MASK_PROB};
pub use sample::{build_sequence, retrieval_text, Sample, Sequence, Task};
pub use scene::{generate_scene, normalize_bbox, AnswerType, GeneratedScene, PixelBox, Scene};
