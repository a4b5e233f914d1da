use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Ranked results for a set of queries together with what counts as a hit.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub rankings: Vec<Vec<String>>,
    pub relevant: Vec<BTreeSet<String>>,
}

impl RetrievalResult {
    /// Checks that every relevant id is part of `gallery`.
    pub fn new(rankings: Vec<Vec<String>>, relevant: Vec<BTreeSet<String>>, gallery: &[String]) -> Result<Self> {
        if rankings.len() != relevant.len() {
            return Err(Error::InvalidArgument(format!(
                "{} rankings for {} relevance sets",
                rankings.len(),
                relevant.len()
            )));
        }
        let known: BTreeSet<&str> = gallery.iter().map(String::as_str).collect();
        if let Some(id) = relevant.iter().flatten().find(|id| !known.contains(id.as_str())) {
            return Err(Error::InvalidArgument(format!("relevant id {id:?} not in gallery")));
        }
        Ok(RetrievalResult { rankings, relevant })
    }

    pub fn len(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }
}

/// Fraction of queries with at least one relevant item in the top `k`.
pub fn recall_at_k(results: &RetrievalResult, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if results.is_empty() {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    let hits = results
        .rankings
        .iter()
        .zip(&results.relevant)
        .filter(|(rank, rel)| rank.iter().take(k).any(|id| rel.contains(id)))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Mean of R@1, R@5 and R@10 over both retrieval directions.
pub fn mean_recall(image_to_text: &RetrievalResult, text_to_image: &RetrievalResult) -> Result<f64> {
    let mut sum = 0.0;
    for r in [image_to_text, text_to_image] {
        for k in [1, 5, 10] {
            sum += recall_at_k(r, k)?;
        }
    }
    Ok(sum / 6.0)
}
