use rand::seq::SliceRandom;

use super::sample::Sample;
use crate::error::{Error, Result};
use crate::seed;

/// Indices into the sample list for one optimization step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub generation: Vec<usize>,
    /// Retrieval-eligible subset of `generation`.
    pub retrieval: Vec<usize>,
}

impl Batch {
    /// InfoNCE needs at least one in-batch negative.
    pub fn has_retrieval(&self) -> bool {
        self.retrieval.len() >= 2
    }
}

/// One epoch of batches over a seed-determined shuffle of `samples`.
pub fn make_batches(samples: &[Sample], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!("batch size {batch_size} < 2")));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut seed::substream(seed, "batches"));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| Batch {
            generation: chunk.to_vec(),
            retrieval: chunk
                .iter()
                .copied()
                .filter(|&i| samples[i].retrieval_eligible)
                .collect(),
        })
        .collect())
}
