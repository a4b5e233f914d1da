use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

/// Lower-cased whitespace tokens.
pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU with uniform weights over orders `1..=n` and the
/// standard brevity penalty (closest reference length, shorter on ties).
pub fn bleu_n(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} candidates for {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("BLEU order must be at least 1".into()));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("every candidate needs a reference".into()));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("non-empty");
        for k in 1..=n {
            let counts = ngrams(cand, k);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngrams(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in counts {
                total[k - 1] += c;
                matched[k - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
            }
        }
    }
    if cand_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

struct TfIdf {
    vecs: Vec<HashMap<Vec<String>, f64>>,
    norms: Vec<f64>,
    /// Bigram count, the length measure used by the length penalty.
    length: f64,
}

fn tfidf(tokens: &[String], df: &HashMap<Vec<String>, usize>, log_n: f64) -> TfIdf {
    let mut vecs = Vec::with_capacity(CIDER_N);
    let mut norms = Vec::with_capacity(CIDER_N);
    for k in 1..=CIDER_N {
        let mut v = HashMap::new();
        let mut sq = 0.0;
        for (g, c) in ngrams(tokens, k) {
            let idf = log_n - (df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
            let w = c as f64 * idf;
            sq += w * w;
            v.insert(g.to_vec(), w);
        }
        vecs.push(v);
        norms.push(sq.sqrt());
    }
    TfIdf {
        vecs,
        norms,
        length: tokens.len().saturating_sub(1) as f64,
    }
}

/// CIDEr-D: per order, clipped TF-IDF cosine with a Gaussian length penalty,
/// averaged over orders 1-4 and references, times 10; corpus mean.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} candidates for {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.len() < 2 {
        return Err(Error::InvalidArgument(
            "CIDEr needs at least two images for document frequencies".into(),
        ));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("every candidate needs a reference".into()));
    }
    let mut df: HashMap<Vec<String>, usize> = HashMap::new();
    for refs in references {
        let mut seen = HashSet::new();
        for r in refs {
            for k in 1..=CIDER_N {
                for g in ngrams(r, k).into_keys() {
                    seen.insert(g.to_vec());
                }
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (candidates.len() as f64).ln();
    let mut total = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        let h = tfidf(cand, &df, log_n);
        let mut score = 0.0;
        for r in refs {
            let r = tfidf(r, &df, log_n);
            let delta = h.length - r.length;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            let mut per_order = 0.0;
            for k in 0..CIDER_N {
                let mut val: f64 = h.vecs[k]
                    .iter()
                    .map(|(g, &w)| {
                        let rw = r.vecs[k].get(g).copied().unwrap_or(0.0);
                        w.min(rw) * rw
                    })
                    .sum();
                if h.norms[k] != 0.0 && r.norms[k] != 0.0 {
                    val /= h.norms[k] * r.norms[k];
                }
                per_order += val * penalty;
            }
            score += per_order / CIDER_N as f64;
        }
        total += score / refs.len() as f64 * 10.0;
    }
    Ok(total / candidates.len() as f64)
}
