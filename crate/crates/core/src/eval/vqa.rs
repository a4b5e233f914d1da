use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct VqaScore {
    /// Mean of the per-type accuracies.
    pub average: f64,
    /// Pooled accuracy over all questions, reported alongside.
    pub overall: f64,
    pub per_type: BTreeMap<String, f64>,
}

fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn answers_match(pred: &str, gold: &str) -> bool {
    normalize_answer(pred) == normalize_answer(gold)
}

pub fn vqa_accuracy<S: AsRef<str>, G: AsRef<str>, T: AsRef<str>>(
    preds: &[S],
    golds: &[G],
    types: &[T],
) -> Result<VqaScore> {
    if preds.len() != golds.len() || preds.len() != types.len() {
        return Err(Error::InvalidArgument(format!(
            "misaligned VQA lists: {} predictions, {} answers, {} types",
            preds.len(),
            golds.len(),
            types.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no questions to score".into()));
    }
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for ((p, g), t) in preds.iter().zip(golds).zip(types) {
        let hit = answers_match(p.as_ref(), g.as_ref());
        correct += hit as usize;
        let e = tally.entry(t.as_ref().to_string()).or_insert((0, 0));
        e.0 += hit as usize;
        e.1 += 1;
    }
    let per_type: BTreeMap<String, f64> = tally.into_iter().map(|(t, (c, n))| (t, c as f64 / n as f64)).collect();
    Ok(VqaScore {
        average: per_type.values().sum::<f64>() / per_type.len() as f64,
        overall: correct as f64 / preds.len() as f64,
        per_type,
    })
}
