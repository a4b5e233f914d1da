use crate::data::{class_prompt, retrieval_text, Image};
use crate::error::{Error, Result};
use crate::model::{CrossInput, Graph, Model};
use crate::vocab::{parse_coord, Prompt, TokenId, Vocabulary, COORD_BASE, EOS, MASK, NUM_COORDS, TXT_CLS};

/// Output of greedy decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Tokens produced after the prefix, EOS excluded.
    pub body: Vec<TokenId>,
    /// True when `max_len` was reached before EOS.
    pub truncated: bool,
}

impl Generation {
    /// Prefix, body and (when emitted) EOS, as the model last saw them.
    pub fn full_sequence(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        let mut s = prefix.to_vec();
        s.extend(&self.body);
        if !self.truncated {
            s.push(EOS);
        }
        s
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `[TXT_CLS, prompt]`.
pub fn task_prefix(prompt: Prompt) -> Vec<TokenId> {
    vec![TXT_CLS, prompt.id()]
}

/// `[TXT_CLS, prompt, text..]` for prompts that carry an input text (a VQA
/// question or a grounding query).
pub fn prefix_with_text(prompt: Prompt, text: &str, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    let mut p = task_prefix(prompt);
    p.extend(vocab.encode(text)?);
    Ok(p)
}

/// Greedy decoding from `[TXT_CLS, prompt]`.
pub fn generate(model: &Model, image: &Image, prompt: Prompt, max_len: usize) -> Result<Generation> {
    generate_with_prefix(model, image, &task_prefix(prompt), max_len)
}

pub fn generate_with_prefix(model: &Model, image: &Image, prefix: &[TokenId], max_len: usize) -> Result<Generation> {
    Ok(generate_batch(model, &[(image, prefix)], max_len)?.remove(0))
}

/// Decodes several inputs in lock-step. Each step appends `MASK` to every
/// unfinished sequence and replaces it with the argmax at that position.
/// `max_len` bounds the whole sequence, prefix included.
pub fn generate_batch(model: &Model, items: &[(&Image, &[TokenId])], max_len: usize) -> Result<Vec<Generation>> {
    let limit = model.config().max_text_len;
    if max_len > limit {
        return Err(Error::TextTooLong {
            len: max_len,
            max: limit,
        });
    }
    if let Some((_, p)) = items.iter().find(|(_, p)| p.len() >= max_len) {
        return Err(Error::TextTooLong {
            len: p.len() + 1,
            max: max_len,
        });
    }
    let mut seqs: Vec<Vec<TokenId>> = items.iter().map(|(_, p)| p.to_vec()).collect();
    let mut done = vec![None; items.len()];
    loop {
        let active: Vec<usize> = (0..items.len()).filter(|&i| done[i].is_none()).collect();
        if active.is_empty() {
            break;
        }
        for &i in &active {
            seqs[i].push(MASK);
        }
        let inputs: Vec<CrossInput> = active
            .iter()
            .map(|&i| CrossInput {
                image: items[i].0,
                tokens: &seqs[i],
            })
            .collect();
        let rows: Vec<Vec<usize>> = active.iter().map(|&i| vec![seqs[i].len() - 1]).collect();
        let mut g = Graph::frozen(model);
        let logits = g.cross_logits(&inputs, &rows)?;
        let next: Vec<TokenId> = (0..active.len())
            .map(|r| argmax(g.value(logits).row(r)) as TokenId)
            .collect();
        drop(g);
        for (&i, tok) in active.iter().zip(next) {
            let last = seqs[i].len() - 1;
            seqs[i][last] = tok;
            if tok == EOS {
                seqs[i].pop();
                done[i] = Some(false);
            } else if seqs[i].len() >= max_len {
                done[i] = Some(true);
            }
        }
    }
    Ok(items
        .iter()
        .zip(seqs)
        .zip(done)
        .map(|(((_, p), s), d)| Generation {
            body: s[p.len()..].to_vec(),
            truncated: d == Some(true),
        })
        .collect())
}

/// Re-masks each generated position of `sequence` (from `from` onwards) one
/// at a time and reports whether the argmax there reproduces the token.
pub fn teacher_forced_agreement(model: &Model, image: &Image, sequence: &[TokenId], from: usize) -> Result<Vec<bool>> {
    let variants: Vec<Vec<TokenId>> = (from..sequence.len())
        .map(|p| {
            let mut s = sequence.to_vec();
            s[p] = MASK;
            s
        })
        .collect();
    let inputs: Vec<CrossInput> = variants.iter().map(|s| CrossInput { image, tokens: s }).collect();
    let rows: Vec<Vec<usize>> = (from..sequence.len()).map(|p| vec![p]).collect();
    let mut g = Graph::frozen(model);
    let logits = g.cross_logits(&inputs, &rows)?;
    Ok((from..sequence.len())
        .enumerate()
        .map(|(r, p)| argmax(g.value(logits).row(r)) as TokenId == sequence[p])
        .collect())
}

/// Puts a box in canonical order by swapping reversed coordinates.
pub fn repair_box(b: [i64; 4]) -> [i64; 4] {
    [b[0].min(b[2]), b[1].min(b[3]), b[0].max(b[2]), b[1].max(b[3])]
}

/// How the four coordinates are decoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroundingDecode {
    /// All four masks filled from one forward pass.
    #[default]
    Joint,
    /// One coordinate per pass, left to right.
    Sequential,
}

/// Predicts a normalized box `[x1, y1, x2, y2]` in `[0, 100]` for `query`.
pub fn ground(model: &Model, vocab: &Vocabulary, image: &Image, query: &str) -> Result<[i64; 4]> {
    let prefix = prefix_with_text(Prompt::BoundingBox, query, vocab)?;
    Ok(ground_batch(model, &[(image, &prefix)], GroundingDecode::Joint)?.remove(0))
}

/// Coordinates restricted to the coordinate sub-vocabulary, so every output
/// parses. Prefixes are `[TXT_CLS, bounding-box prompt, query..]`.
pub fn ground_batch(model: &Model, items: &[(&Image, &[TokenId])], decode: GroundingDecode) -> Result<Vec<[i64; 4]>> {
    let restricted = |row: &[f64]| {
        let lo = COORD_BASE as usize;
        let k = argmax(&row[lo..lo + NUM_COORDS]);
        parse_coord((lo + k) as TokenId).expect("coordinate range")
    };
    let mut seqs: Vec<Vec<TokenId>> = items
        .iter()
        .map(|(_, p)| {
            let mut s = p.to_vec();
            s.extend([MASK; 4]);
            s
        })
        .collect();
    let mut out = vec![[0i64; 4]; items.len()];
    let passes: Vec<Vec<usize>> = match decode {
        GroundingDecode::Joint => vec![vec![0, 1, 2, 3]],
        GroundingDecode::Sequential => (0..4).map(|c| vec![c]).collect(),
    };
    for coords in passes {
        let inputs: Vec<CrossInput> = items
            .iter()
            .zip(&seqs)
            .map(|((image, _), s)| CrossInput { image, tokens: s })
            .collect();
        let rows: Vec<Vec<usize>> = items
            .iter()
            .map(|(_, p)| coords.iter().map(|c| p.len() + c).collect())
            .collect();
        let mut g = Graph::frozen(model);
        let logits = g.cross_logits(&inputs, &rows)?;
        let t = g.value(logits).clone();
        drop(g);
        for (i, (_, p)) in items.iter().enumerate() {
            for (j, &c) in coords.iter().enumerate() {
                let v = restricted(t.row(i * coords.len() + j));
                out[i][c] = v;
                seqs[i][p.len() + c] = COORD_BASE + v as TokenId;
            }
        }
    }
    Ok(out.into_iter().map(repair_box).collect())
}

/// Unrestricted joint decode, for diagnostics: raw argmax tokens at the four
/// coordinate positions.
pub fn ground_unrestricted(model: &Model, image: &Image, prefix: &[TokenId]) -> Result<[TokenId; 4]> {
    let mut s = prefix.to_vec();
    s.extend([MASK; 4]);
    let mut g = Graph::frozen(model);
    let rows = vec![(prefix.len()..prefix.len() + 4).collect()];
    let logits = g.cross_logits(&[CrossInput { image, tokens: &s }], &rows)?;
    let t = g.value(logits);
    Ok([0, 1, 2, 3].map(|r| argmax(t.row(r)) as TokenId))
}

/// Index of the class whose prompt embedding is most similar to the image;
/// earlier classes win ties.
pub fn zero_shot_classify(model: &Model, vocab: &Vocabulary, image: &Image, classes: &[&str]) -> Result<usize> {
    Ok(zero_shot_batch(model, vocab, &[image], classes)?[0])
}

pub fn zero_shot_batch(model: &Model, vocab: &Vocabulary, images: &[&Image], classes: &[&str]) -> Result<Vec<usize>> {
    if classes.is_empty() {
        return Err(Error::InvalidArgument("no classes".into()));
    }
    let prompts = classes
        .iter()
        .map(|c| retrieval_text(&class_prompt(c), vocab))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[TokenId]> = prompts.iter().map(Vec::as_slice).collect();
    let t = model.encode_texts(&refs)?;
    let v = model.encode_images(images)?;
    Ok(v.iter()
        .map(|e| {
            let sims: Vec<f64> = t.iter().map(|c| c.iter().zip(e).map(|(a, b)| a * b).sum()).collect();
            argmax(&sims)
        })
        .collect())
}
