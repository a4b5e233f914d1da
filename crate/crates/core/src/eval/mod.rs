//! Scoring for retrieval, captioning, grounding and question answering.

mod grounding;
mod harness;
mod report;
mod retrieval;
mod text;
mod vqa;

pub use grounding::{grounding_accuracy, iou, iou_parts, GridBox, GroundingScore, DEFAULT_IOU_THRESHOLD};
pub use harness::{
    caption_generation, caption_token_accuracy, classify_eval, grounding_eval, land_cover_of, retrieval_eval, vqa_eval,
    CaptionEval, ClassifyEval, Decoded, GroundingEval, RetrievalEval, VqaEval,
};
pub use report::{read_predictions, write_predictions, MetricsReport, Prediction};
pub use retrieval::{mean_recall, recall_at_k, RetrievalResult};
pub use text::{bleu_n, cider, words};
pub use vqa::{answers_match, vqa_accuracy, VqaScore};
