use rand::Rng;

use super::sample::{Sequence, Task};
use crate::vocab::{TokenId, MASK};

pub const DEFAULT_MASK_PROB: f64 = 0.3;

/// Input with some tokens replaced by `MASK`, plus what the model must recover.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub tokens: Vec<TokenId>,
    /// Masked indices, ascending.
    pub positions: Vec<usize>,
    /// Original token at each entry of `positions`.
    pub targets: Vec<TokenId>,
}

impl MaskedSequence {
    /// Per-index targets for a cross-entropy over the full sequence; entries
    /// outside `positions` are never read.
    pub fn dense_targets(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.tokens.iter().map(|&x| x as usize).collect();
        for (&p, &id) in self.positions.iter().zip(&self.targets) {
            t[p] = id as usize;
        }
        t
    }

    fn from_positions(seq: &Sequence, positions: Vec<usize>) -> Self {
        let mut tokens = seq.ids.clone();
        let targets = positions.iter().map(|&p| seq.ids[p]).collect();
        for &p in &positions {
            tokens[p] = MASK;
        }
        MaskedSequence {
            tokens,
            positions,
            targets,
        }
    }
}

/// Chooses the masked set for one training sequence.
///
/// Grounding masks exactly the four coordinate tokens. Captions and VQA mask
/// each position after the prompt (answer and final EOS included) with
/// probability `p_mask`, forcing one uniformly chosen position when the draw
/// selects none. `TXT_CLS` and the prompt are never masked.
pub fn apply_mask(seq: &Sequence, task: Task, p_mask: f64, rng: &mut impl Rng) -> MaskedSequence {
    let positions = match task {
        Task::Grounding => {
            let start = seq.split.expect("grounding sequence records its coordinates");
            (start..start + 4).collect()
        }
        Task::CaptionShort | Task::CaptionLong | Task::Vqa => {
            let candidates = seq.body_start..seq.len();
            let mut picked: Vec<usize> = candidates.clone().filter(|_| rng.random_bool(p_mask)).collect();
            if picked.is_empty() {
                picked.push(rng.random_range(candidates));
            }
            picked
        }
    };
    MaskedSequence::from_positions(seq, positions)
}
