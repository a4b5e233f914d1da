use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::image::Image;
use super::scene::{normalize_bbox, PixelBox};
use crate::error::{Error, Result};
use crate::vocab::{coord_token, Prompt, TokenId, Vocabulary, EOS, TXT_CLS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    CaptionShort,
    CaptionLong,
    Vqa,
    Grounding,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::CaptionShort, Task::CaptionLong, Task::Vqa, Task::Grounding];

    pub fn prompt(self) -> Prompt {
        match self {
            Task::CaptionShort => Prompt::ShortCaption,
            Task::CaptionLong => Prompt::LongCaption,
            Task::Vqa => Prompt::Vqa,
            Task::Grounding => Prompt::BoundingBox,
        }
    }

    /// Only caption pairs feed the contrastive objective.
    pub fn retrieval_eligible(self) -> bool {
        matches!(self, Task::CaptionShort | Task::CaptionLong)
    }

    pub fn is_caption(self) -> bool {
        self.retrieval_eligible()
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::CaptionShort => "caption_short",
            Task::CaptionLong => "caption_long",
            Task::Vqa => "vqa",
            Task::Grounding => "grounding",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name() == s)
    }
}

/// One training/evaluation item: an image plus the text for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Identifier of the image shared by all samples of one scene.
    pub image_id: String,
    pub image: Arc<Image>,
    pub task: Task,
    /// Caption, question, or grounding query.
    pub text: String,
    pub answer: Option<String>,
    pub bbox_px: Option<PixelBox>,
    pub retrieval_eligible: bool,
}

/// A task sequence `[TXT_CLS, prompt, body.., EOS]` with its layout recorded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub ids: Vec<TokenId>,
    /// First index after the prompt token.
    pub body_start: usize,
    /// VQA: index of the first answer token. Grounding: first coordinate token.
    pub split: Option<usize>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Index of the final EOS.
    pub fn eos(&self) -> usize {
        self.ids.len() - 1
    }
}

/// Laid-out token sequence for a sample.
pub fn build_sequence(sample: &Sample, vocab: &Vocabulary) -> Result<Sequence> {
    let mut ids = vec![TXT_CLS, sample.task.prompt().id()];
    let body_start = ids.len();
    ids.extend(vocab.encode(&sample.text)?);
    let split = match sample.task {
        Task::CaptionShort | Task::CaptionLong => None,
        Task::Vqa => {
            let answer = sample.answer.as_deref().ok_or_else(|| Error::MissingField {
                id: sample.id.clone(),
                field: "answer",
            })?;
            let at = ids.len();
            ids.extend(vocab.encode(answer)?);
            Some(at)
        }
        Task::Grounding => {
            let bbox = sample.bbox_px.ok_or_else(|| Error::MissingField {
                id: sample.id.clone(),
                field: "bbox_px",
            })?;
            let at = ids.len();
            for v in normalize_bbox(bbox, sample.image.width, sample.image.height)? {
                ids.push(coord_token(v)?);
            }
            Some(at)
        }
    };
    ids.push(EOS);
    Ok(Sequence { ids, body_start, split })
}

/// Retrieval-side text: `[TXT_CLS, caption.., EOS]`, without a task prompt.
pub fn retrieval_text(text: &str, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    let mut ids = vec![TXT_CLS];
    ids.extend(vocab.encode(text)?);
    ids.push(EOS);
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::generate_scene;
    use crate::vocab::parse_coord;

    fn sample(task: Task, text: &str) -> Sample {
        Sample {
            id: "s".into(),
            image_id: "i".into(),
            image: Arc::new(Image::new(32, 32)),
            task,
            text: text.into(),
            answer: None,
            bbox_px: None,
            retrieval_eligible: task.retrieval_eligible(),
        }
    }

    #[test]
    fn caption_layout() {
        let v = Vocabulary::build(&["a road"]);
        let seq = build_sequence(&sample(Task::CaptionShort, "a road"), &v).unwrap();
        assert_eq!(
            seq.ids,
            vec![
                TXT_CLS,
                Prompt::ShortCaption.id(),
                v.id("a").unwrap(),
                v.id("road").unwrap(),
                EOS
            ]
        );
        assert_eq!(seq.body_start, 2);
    }

    #[test]
    fn grounding_ends_with_four_coordinates() {
        let v = Vocabulary::build(&["the red square"]);
        let mut s = sample(Task::Grounding, "the red square");
        s.bbox_px = Some(PixelBox {
            x1: 3,
            y1: 5,
            x2: 17,
            y2: 29,
        });
        let seq = build_sequence(&s, &v).unwrap();
        let n = seq.len();
        assert_eq!(seq.ids[n - 1], EOS);
        let coords: Vec<i64> = seq.ids[n - 5..n - 1]
            .iter()
            .map(|&id| parse_coord(id).unwrap())
            .collect();
        assert_eq!(coords, vec![9, 16, 53, 91]);
        assert_eq!(seq.split, Some(n - 5));
    }

    #[test]
    fn missing_fields_are_errors() {
        let v = Vocabulary::build(&["the red square ?"]);
        let err = build_sequence(&sample(Task::Grounding, "the red square"), &v).unwrap_err();
        assert!(matches!(err, Error::MissingField { field: "bbox_px", .. }));
        let err = build_sequence(&sample(Task::Vqa, "the red square ?"), &v).unwrap_err();
        assert!(matches!(err, Error::MissingField { field: "answer", .. }));
    }

    #[test]
    fn vqa_boundary_matches_template() {
        let scenes: Vec<_> = (0..100).map(generate_scene).collect();
        let corpus: Vec<String> = scenes
            .iter()
            .flat_map(|g| [g.qa.question.clone(), g.qa.answer.clone()])
            .collect();
        let v = Vocabulary::build(&corpus);
        for g in &scenes {
            let mut s = sample(Task::Vqa, &g.qa.question);
            s.answer = Some(g.qa.answer.clone());
            let seq = build_sequence(&s, &v).unwrap();
            // The question template always ends with "?", the answer is one token.
            let at = seq.split.unwrap();
            assert_eq!(v.token(seq.ids[at - 1]), Some("?"));
            assert_eq!(v.decode(&seq.ids[at..seq.eos()]).unwrap(), g.qa.answer);
            assert_eq!(at, 2 + g.qa.question.split_whitespace().count());
        }
    }
}
