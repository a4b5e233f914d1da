//! Runs a trained model over samples and scores the outputs.

use std::collections::{BTreeMap, BTreeSet};

use super::grounding::{grounding_accuracy, GridBox, GroundingScore, DEFAULT_IOU_THRESHOLD};
use super::report::{MetricsReport, Prediction};
use super::retrieval::{mean_recall, recall_at_k, RetrievalResult};
use super::text::{bleu_n, cider, words};
use super::vqa::{vqa_accuracy, VqaScore};
use crate::data::scene::LandCover;
use crate::data::{build_sequence, normalize_bbox, retrieval_text, AnswerType, Image, Sample, Task};
use crate::error::{Error, Result};
use crate::inference::{
    generate_batch, ground_batch, prefix_with_text, retrieve, task_prefix, teacher_forced_agreement, zero_shot_batch,
    EmbeddingIndex, GroundingDecode,
};
use crate::model::{Modality, Model};
use crate::vocab::{TokenId, Vocabulary};

/// Inputs per forward pass during evaluation.
const CHUNK: usize = 64;

fn of_task<'a>(samples: &'a [Sample], tasks: &[Task]) -> Vec<&'a Sample> {
    samples.iter().filter(|s| tasks.contains(&s.task)).collect()
}

fn require(samples: &[&Sample], what: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset(format!("no {what} samples to evaluate")));
    }
    Ok(())
}

/// Fraction of caption tokens (body and EOS) recovered by argmax when each is
/// masked in turn with the gold prefix visible.
pub fn caption_token_accuracy(model: &Model, vocab: &Vocabulary, samples: &[Sample]) -> Result<f64> {
    let caps = of_task(samples, &[Task::CaptionShort, Task::CaptionLong]);
    require(&caps, "caption")?;
    let (mut hit, mut total) = (0usize, 0usize);
    for s in caps {
        let seq = build_sequence(s, vocab)?;
        let agree = teacher_forced_agreement(model, &s.image, &seq.ids, seq.body_start)?;
        hit += agree.iter().filter(|&&a| a).count();
        total += agree.len();
    }
    Ok(hit as f64 / total as f64)
}

/// A generated sequence kept for decoding checks.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub sample_id: String,
    pub prefix_len: usize,
    pub sequence: Vec<TokenId>,
    pub truncated: bool,
}

fn decode_all(model: &Model, items: &[(&Sample, Vec<TokenId>)]) -> Result<Vec<Decoded>> {
    let max_len = model.config().max_text_len;
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(CHUNK) {
        let inputs: Vec<(&Image, &[TokenId])> = chunk.iter().map(|(s, p)| (&*s.image, p.as_slice())).collect();
        for ((s, p), g) in chunk.iter().zip(generate_batch(model, &inputs, max_len)?) {
            out.push(Decoded {
                sample_id: s.id.clone(),
                prefix_len: p.len(),
                sequence: g.full_sequence(p),
                truncated: g.truncated,
            });
        }
    }
    Ok(out)
}

fn body_text(vocab: &Vocabulary, d: &Decoded) -> String {
    let end = if d.truncated {
        d.sequence.len()
    } else {
        d.sequence.len() - 1
    };
    vocab
        .decode(&d.sequence[d.prefix_len..end])
        .unwrap_or_else(|_| "<unk>".to_string())
}

#[derive(Debug, Clone)]
pub struct CaptionEval {
    pub predictions: Vec<Prediction>,
    pub decoded: Vec<Decoded>,
    pub bleu1: f64,
    pub bleu4: f64,
    /// `None` when fewer than two images are present.
    pub cider: Option<f64>,
}

/// One generated caption per (image, caption task); the references are all
/// captions of that task for the image.
pub fn caption_generation(model: &Model, vocab: &Vocabulary, samples: &[Sample]) -> Result<CaptionEval> {
    let caps = of_task(samples, &[Task::CaptionShort, Task::CaptionLong]);
    require(&caps, "caption")?;
    let mut refs: BTreeMap<(String, Task), Vec<&Sample>> = BTreeMap::new();
    for s in &caps {
        refs.entry((s.image_id.clone(), s.task)).or_default().push(s);
    }
    let items: Vec<(&Sample, Vec<TokenId>)> = refs
        .values()
        .map(|group| (group[0], task_prefix(group[0].task.prompt())))
        .collect();
    let decoded = decode_all(model, &items)?;
    let mut cands = Vec::new();
    let mut references = Vec::new();
    let mut predictions = Vec::new();
    for (group, d) in refs.values().zip(&decoded) {
        let text = body_text(vocab, d);
        cands.push(words(&text));
        references.push(group.iter().map(|s| words(&s.text)).collect::<Vec<_>>());
        predictions.push(Prediction {
            id: group[0].id.clone(),
            task: group[0].task.name().to_string(),
            output: text,
            gold: group[0].text.clone(),
        });
    }
    Ok(CaptionEval {
        bleu1: bleu_n(&cands, &references, 1)?,
        bleu4: bleu_n(&cands, &references, 4)?,
        cider: if cands.len() >= 2 {
            Some(cider(&cands, &references)?)
        } else {
            None
        },
        predictions,
        decoded,
    })
}

#[derive(Debug, Clone)]
pub struct VqaEval {
    pub predictions: Vec<Prediction>,
    pub decoded: Vec<Decoded>,
    pub score: VqaScore,
}

pub fn vqa_eval(model: &Model, vocab: &Vocabulary, samples: &[Sample]) -> Result<VqaEval> {
    let qs = of_task(samples, &[Task::Vqa]);
    require(&qs, "vqa")?;
    let items = qs
        .iter()
        .map(|s| Ok((*s, prefix_with_text(Task::Vqa.prompt(), &s.text, vocab)?)))
        .collect::<Result<Vec<_>>>()?;
    let decoded = decode_all(model, &items)?;
    let mut predictions = Vec::new();
    let mut types = Vec::new();
    for (s, d) in qs.iter().zip(&decoded) {
        let gold = s.answer.clone().ok_or_else(|| Error::MissingField {
            id: s.id.clone(),
            field: "answer",
        })?;
        types.push(AnswerType::of_question(&s.text).map_or("other", AnswerType::name));
        predictions.push(Prediction {
            id: s.id.clone(),
            task: Task::Vqa.name().to_string(),
            output: body_text(vocab, d),
            gold,
        });
    }
    let outs: Vec<&str> = predictions.iter().map(|p| p.output.as_str()).collect();
    let golds: Vec<&str> = predictions.iter().map(|p| p.gold.as_str()).collect();
    let score = vqa_accuracy(&outs, &golds, &types)?;
    Ok(VqaEval {
        predictions,
        decoded,
        score,
    })
}

#[derive(Debug, Clone)]
pub struct GroundingEval {
    pub predictions: Vec<Prediction>,
    pub boxes: Vec<GridBox>,
    pub gold: Vec<GridBox>,
    pub score: GroundingScore,
}

fn box_text(b: &GridBox) -> String {
    format!("{} {} {} {}", b[0], b[1], b[2], b[3])
}

pub fn grounding_eval(
    model: &Model,
    vocab: &Vocabulary,
    samples: &[Sample],
    decode: GroundingDecode,
) -> Result<GroundingEval> {
    let qs = of_task(samples, &[Task::Grounding]);
    require(&qs, "grounding")?;
    let mut boxes = Vec::with_capacity(qs.len());
    let mut gold = Vec::with_capacity(qs.len());
    for chunk in qs.chunks(CHUNK) {
        let prefixes = chunk
            .iter()
            .map(|s| prefix_with_text(Task::Grounding.prompt(), &s.text, vocab))
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<(&Image, &[TokenId])> = chunk
            .iter()
            .zip(&prefixes)
            .map(|(s, p)| (&*s.image, p.as_slice()))
            .collect();
        boxes.extend(ground_batch(model, &inputs, decode)?);
        for s in chunk {
            let b = s.bbox_px.ok_or_else(|| Error::MissingField {
                id: s.id.clone(),
                field: "bbox_px",
            })?;
            gold.push(normalize_bbox(b, s.image.width, s.image.height)?);
        }
    }
    let predictions = qs
        .iter()
        .zip(boxes.iter().zip(&gold))
        .map(|(s, (b, g))| Prediction {
            id: s.id.clone(),
            task: Task::Grounding.name().to_string(),
            output: box_text(b),
            gold: box_text(g),
        })
        .collect();
    let score = grounding_accuracy(&boxes, &gold, DEFAULT_IOU_THRESHOLD)?;
    Ok(GroundingEval {
        predictions,
        boxes,
        gold,
        score,
    })
}

/// Image-to-text and text-to-image retrieval over the caption samples. The
/// gallery holds one entry per distinct image and one per caption sample; a
/// caption is relevant to every image that carries identical text.
#[derive(Debug, Clone)]
pub struct RetrievalEval {
    pub image_ids: Vec<String>,
    pub text_ids: Vec<String>,
    pub image_vectors: Vec<Vec<f64>>,
    pub text_vectors: Vec<Vec<f64>>,
    pub image_to_text: RetrievalResult,
    pub text_to_image: RetrievalResult,
}

impl RetrievalEval {
    pub fn report(&self, m: &mut MetricsReport) -> Result<()> {
        for (dir, r) in [("i2t", &self.image_to_text), ("t2i", &self.text_to_image)] {
            for k in [1, 5, 10] {
                m.insert(format!("retrieval.{dir}.r@{k}"), recall_at_k(r, k)?);
            }
        }
        m.insert("retrieval.mr", mean_recall(&self.image_to_text, &self.text_to_image)?);
        Ok(())
    }
}

pub fn retrieval_eval(model: &Model, vocab: &Vocabulary, samples: &[Sample]) -> Result<RetrievalEval> {
    let caps: Vec<&Sample> = samples.iter().filter(|s| s.retrieval_eligible).collect();
    require(&caps, "caption")?;
    let mut images: Vec<&Sample> = Vec::new();
    let mut seen = BTreeSet::new();
    for s in &caps {
        if seen.insert(s.image_id.clone()) {
            images.push(s);
        }
    }
    let mut image_vectors = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let imgs: Vec<&Image> = chunk.iter().map(|s| &*s.image).collect();
        image_vectors.extend(model.encode_images(&imgs)?);
    }
    let tokens = caps
        .iter()
        .map(|s| retrieval_text(&s.text, vocab))
        .collect::<Result<Vec<_>>>()?;
    let mut text_vectors = Vec::with_capacity(caps.len());
    for chunk in tokens.chunks(CHUNK) {
        let refs: Vec<&[TokenId]> = chunk.iter().map(Vec::as_slice).collect();
        text_vectors.extend(model.encode_texts(&refs)?);
    }
    let image_ids: Vec<String> = images.iter().map(|s| s.image_id.clone()).collect();
    let text_ids: Vec<String> = caps.iter().map(|s| s.id.clone()).collect();

    // texts carried by each image
    let mut texts_of: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for s in &caps {
        texts_of.entry(&s.image_id).or_default().insert(&s.text);
    }
    let image_index = EmbeddingIndex::new(image_ids.clone(), image_vectors.clone(), Some(Modality::Vision))?;
    let text_index = EmbeddingIndex::new(text_ids.clone(), text_vectors.clone(), Some(Modality::Language))?;

    let mut i2t_rank = Vec::new();
    let mut i2t_rel = Vec::new();
    for (img, v) in images.iter().zip(&image_vectors) {
        i2t_rank.push(
            retrieve(v, &text_index, text_ids.len())?
                .into_iter()
                .map(|h| h.id)
                .collect(),
        );
        let mine = &texts_of[img.image_id.as_str()];
        i2t_rel.push(
            caps.iter()
                .filter(|c| mine.contains(c.text.as_str()))
                .map(|c| c.id.clone())
                .collect(),
        );
    }
    let mut t2i_rank = Vec::new();
    let mut t2i_rel = Vec::new();
    for (cap, v) in caps.iter().zip(&text_vectors) {
        t2i_rank.push(
            retrieve(v, &image_index, image_ids.len())?
                .into_iter()
                .map(|h| h.id)
                .collect(),
        );
        t2i_rel.push(
            texts_of
                .iter()
                .filter(|(_, ts)| ts.contains(cap.text.as_str()))
                .map(|(id, _)| id.to_string())
                .collect(),
        );
    }
    Ok(RetrievalEval {
        image_to_text: RetrievalResult::new(i2t_rank, i2t_rel, &text_ids)?,
        text_to_image: RetrievalResult::new(t2i_rank, t2i_rel, &image_ids)?,
        image_ids,
        text_ids,
        image_vectors,
        text_vectors,
    })
}

/// Land-cover class named at the end of a caption ("... in a forest area").
pub fn land_cover_of(caption: &str) -> Option<LandCover> {
    let w: Vec<&str> = caption.split_whitespace().collect();
    match w.as_slice() {
        [.., class, "area"] => LandCover::from_word(class),
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct ClassifyEval {
    pub predictions: Vec<Prediction>,
    pub accuracy: f64,
}

/// Zero-shot land-cover classification of each distinct captioned image.
pub fn classify_eval(model: &Model, vocab: &Vocabulary, samples: &[Sample]) -> Result<ClassifyEval> {
    let mut items: Vec<(&Sample, LandCover)> = Vec::new();
    let mut seen = BTreeSet::new();
    for s in samples.iter().filter(|s| s.task.is_caption()) {
        if let Some(c) = land_cover_of(&s.text) {
            if seen.insert(s.image_id.clone()) {
                items.push((s, c));
            }
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset(
            "no captioned images with a land-cover class".into(),
        ));
    }
    let classes: Vec<&str> = LandCover::ALL.iter().map(|c| c.word()).collect();
    let mut predictions = Vec::new();
    let mut hits = 0;
    for chunk in items.chunks(CHUNK) {
        let imgs: Vec<&Image> = chunk.iter().map(|(s, _)| &*s.image).collect();
        for ((s, gold), k) in chunk.iter().zip(zero_shot_batch(model, vocab, &imgs, &classes)?) {
            hits += (classes[k] == gold.word()) as usize;
            predictions.push(Prediction {
                id: s.image_id.clone(),
                task: "classify".to_string(),
                output: classes[k].to_string(),
                gold: gold.word().to_string(),
            });
        }
    }
    Ok(ClassifyEval {
        accuracy: hits as f64 / items.len() as f64,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn land_cover_from_caption() {
        assert_eq!(
            land_cover_of("one red square in a forest area"),
            Some(LandCover::Forest)
        );
        assert_eq!(land_cover_of("one red square"), None);
    }
}
