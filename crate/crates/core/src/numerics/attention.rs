//! Masked multi-head attention over ragged, row-stacked sequences.

use std::sync::Arc;

use rayon::prelude::*;

/// Boolean `[n x n]` matrix; `allows(i, j)` means query `i` may attend key `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                allowed.push(f(i, j));
            }
        }
        AttentionMask { n, allowed }
    }

    /// Every position attends every position.
    pub fn full(n: usize) -> Self {
        Self::from_fn(n, |_, _| true)
    }

    /// Bidirectional over the first `valid` positions; the padding tail only
    /// sees itself so that no real position ever reads it.
    pub fn padded(n: usize, valid: usize) -> Self {
        Self::from_fn(n, |i, j| (i < valid && j < valid) || i == j)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

/// One sequence inside a row-stacked activation matrix.
#[derive(Debug, Clone)]
pub struct AttnSegment {
    pub start: usize,
    pub mask: Arc<AttentionMask>,
}

impl AttnSegment {
    pub fn new(start: usize, mask: Arc<AttentionMask>) -> Self {
        AttnSegment { start, mask }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Attention probabilities for one segment, `[heads][n][n]` flattened.
pub(crate) type SegmentProbs = Vec<f64>;

pub(crate) fn forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    width: usize,
    heads: usize,
    segments: &[AttnSegment],
    total_rows: usize,
) -> (Vec<f64>, Vec<SegmentProbs>) {
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let results: Vec<(Vec<f64>, SegmentProbs)> = segments
        .par_iter()
        .map(|seg| {
            let n = seg.len();
            let mut out = vec![0.0; n * width];
            let mut probs = vec![0.0; heads * n * n];
            let mut scores = vec![0.0; n];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..n {
                    let qi = &q[(seg.start + i) * width..][cols.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..n {
                        if seg.mask.allows(i, j) {
                            let kj = &k[(seg.start + j) * width..][cols.clone()];
                            let s = dot(qi, kj) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                    let mut sum = 0.0;
                    for j in 0..n {
                        if seg.mask.allows(i, j) {
                            let e = (scores[j] - max).exp();
                            p[j] = e;
                            sum += e;
                        }
                    }
                    let o = &mut out[i * width..][cols.clone()];
                    for j in 0..n {
                        if seg.mask.allows(i, j) {
                            p[j] /= sum;
                            let vj = &v[(seg.start + j) * width..][cols.clone()];
                            for (od, vd) in o.iter_mut().zip(vj) {
                                *od += p[j] * vd;
                            }
                        }
                    }
                }
            }
            (out, probs)
        })
        .collect();

    let mut out = vec![0.0; total_rows * width];
    let mut all_probs = Vec::with_capacity(segments.len());
    for (seg, (o, p)) in segments.iter().zip(results) {
        out[seg.start * width..(seg.start + seg.len()) * width].copy_from_slice(&o);
        all_probs.push(p);
    }
    (out, all_probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d_out: &[f64],
    width: usize,
    heads: usize,
    segments: &[AttnSegment],
    probs: &[SegmentProbs],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let results: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = segments
        .par_iter()
        .zip(probs.par_iter())
        .map(|(seg, probs)| {
            let n = seg.len();
            let mut dq = vec![0.0; n * width];
            let mut dk = vec![0.0; n * width];
            let mut dv = vec![0.0; n * width];
            let mut dp = vec![0.0; n];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..n {
                    let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                    let doi = &d_out[(seg.start + i) * width..][cols.clone()];
                    let mut c = 0.0;
                    for j in 0..n {
                        if seg.mask.allows(i, j) {
                            let vj = &v[(seg.start + j) * width..][cols.clone()];
                            dp[j] = dot(doi, vj);
                            c += p[j] * dp[j];
                            let dvj = &mut dv[j * width..][cols.clone()];
                            for (a, b) in dvj.iter_mut().zip(doi) {
                                *a += p[j] * b;
                            }
                        }
                    }
                    let qi = &q[(seg.start + i) * width..][cols.clone()];
                    for j in 0..n {
                        if seg.mask.allows(i, j) {
                            let ds = p[j] * (dp[j] - c) * scale;
                            let kj = &k[(seg.start + j) * width..][cols.clone()];
                            let dqi = &mut dq[i * width..][cols.clone()];
                            for (a, b) in dqi.iter_mut().zip(kj) {
                                *a += ds * b;
                            }
                            let dkj = &mut dk[j * width..][cols.clone()];
                            for (a, b) in dkj.iter_mut().zip(qi) {
                                *a += ds * b;
                            }
                        }
                    }
                }
            }
            (dq, dk, dv)
        })
        .collect();

    let total = q.len();
    let (mut dq, mut dk, mut dv) = (vec![0.0; total], vec![0.0; total], vec![0.0; total]);
    for (seg, (a, b, c)) in segments.iter().zip(results) {
        let range = seg.start * width..(seg.start + seg.len()) * width;
        dq[range.clone()].iter_mut().zip(&a).for_each(|(x, y)| *x += y);
        dk[range.clone()].iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        dv[range].iter_mut().zip(&c).for_each(|(x, y)| *x += y);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padded_mask_isolates_tail() {
        let m = AttentionMask::padded(4, 2);
        assert!(m.allows(0, 1) && m.allows(1, 0));
        assert!(!m.allows(0, 2) && !m.allows(2, 0) && !m.allows(2, 3));
        assert!(m.allows(3, 3));
        assert_eq!(m.count_allowed(), 4 + 2);
    }
}
