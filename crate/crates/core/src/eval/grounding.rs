use crate::error::{Error, Result};

/// Boxes are `[x1, y1, x2, y2]` on the integer grid with `x1 <= x2`, `y1 <= y2`.
pub type GridBox = [i64; 4];

fn area(b: &GridBox) -> i64 {
    (b[2] - b[0]).max(0) * (b[3] - b[1]).max(0)
}

/// Exact intersection and union areas.
pub fn iou_parts(a: &GridBox, b: &GridBox) -> (i64, i64) {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0);
    let inter = w * h;
    (inter, area(a) + area(b) - inter)
}

pub fn iou(a: &GridBox, b: &GridBox) -> f64 {
    let (inter, union) = iou_parts(a, b);
    if union == 0 {
        // two zero-area boxes: only a perfect match counts
        return if a == b { 1.0 } else { 0.0 };
    }
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundingScore {
    /// Fraction of predictions with IoU strictly above the threshold.
    pub accuracy: f64,
    pub mean_iou: f64,
}

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

pub fn grounding_accuracy(pred: &[GridBox], gold: &[GridBox], threshold: f64) -> Result<GroundingScore> {
    if pred.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted boxes for {} gold boxes",
            pred.len(),
            gold.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("no boxes to score".into()));
    }
    let ious: Vec<f64> = pred.iter().zip(gold).map(|(p, g)| iou(p, g)).collect();
    let n = ious.len() as f64;
    Ok(GroundingScore {
        accuracy: ious.iter().filter(|&&v| v > threshold).count() as f64 / n,
        mean_iou: ious.iter().sum::<f64>() / n,
    })
}
