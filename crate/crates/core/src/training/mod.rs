//! Two-stage optimization: grounding warm-up, checkpoint interpolation, then
//! joint multi-task training.

mod config;
mod merge;
mod stage;

pub use config::{RunConfig, StageConfig, DEFAULT_ALPHA};
pub use merge::wise_ft_merge;
pub use stage::{
    clip_global_norm, lr_at, train_retrieval, train_stage, train_stage1_vg, train_stage2_multitask, Objective,
    StageResult,
};

use std::path::Path;

use crate::error::Result;
use crate::model::Checkpoint;

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests;
