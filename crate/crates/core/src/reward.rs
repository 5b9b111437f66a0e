//! Rollout rewards: answer accuracy, response format, and saliency-box
//! alignment, combined additively.

use crate::error::{Error, Result};
use crate::model::{special, SegmentedSequence};
use crate::saliency::SaliencyMap;
use serde::{Deserialize, Serialize};

/// Axis-aligned pixel box, half-open on the max side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn validate(&self, image_w: usize, image_h: usize) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::Validation(format!(
                "degenerate box ({}, {})..({}, {})",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        if self.x1 > image_w || self.y1 > image_h {
            return Err(Error::Validation(format!(
                "box ({}, {})..({}, {}) exceeds image {}x{}",
                self.x0, self.y0, self.x1, self.y1, image_w, image_h
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Pixel membership mask of the union of boxes.
pub fn union_mask(boxes: &[BoundingBox], image_w: usize, image_h: usize) -> Vec<bool> {
    let mut mask = vec![false; image_w * image_h];
    for b in boxes {
        for y in b.y0..b.y1.min(image_h) {
            for x in b.x0..b.x1.min(image_w) {
                mask[y * image_w + x] = true;
            }
        }
    }
    mask
}

/// The three reward components and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub accuracy: f64,
    pub format: f64,
    pub saliency: f64,
    pub overall: f64,
}

/// Fraction of total saliency mass (expanded to pixels, nearest neighbor)
/// that falls inside the union of the boxes. An all-zero map scores 0.
pub fn alignment_score(
    map: &SaliencyMap,
    boxes: &[BoundingBox],
    image_w: usize,
    image_h: usize,
) -> Result<f64> {
    if boxes.is_empty() {
        return Err(Error::Usage("alignment score needs at least one bounding box".into()));
    }
    for b in boxes {
        b.validate(image_w, image_h)?;
    }
    if image_w % map.grid_cols != 0
        || image_h % map.grid_rows != 0
        || image_w / map.grid_cols != image_h / map.grid_rows
    {
        return Err(Error::Shape(format!(
            "image {}x{} is not a square-patch expansion of grid {}x{}",
            image_w, image_h, map.grid_rows, map.grid_cols
        )));
    }
    let patch_px = image_w / map.grid_cols;

    let mask = union_mask(boxes, image_w, image_h);
    let mut inside = 0.0;
    let mut total = 0.0;
    for y in 0..image_h {
        for x in 0..image_w {
            let v = map.cell(y / patch_px, x / patch_px);
            total += v;
            if mask[y * image_w + x] {
                inside += v;
            }
        }
    }
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(inside / total)
}

/// 1 iff the generated part starts with the open-think token, contains
/// exactly one close-think token, and at least one non-EOS token follows it.
pub fn format_reward(seq: &SegmentedSequence) -> f64 {
    let resp = seq.response_positions();
    if resp.is_empty() {
        return 0.0;
    }
    if seq.token(resp[0]) != special::THINK_OPEN {
        return 0.0;
    }
    let closes = resp.iter().filter(|&&p| seq.token(p) == special::THINK_CLOSE).count();
    if closes != 1 {
        return 0.0;
    }
    let close_at = resp.iter().position(|&p| seq.token(p) == special::THINK_CLOSE).unwrap();
    let has_answer = resp[close_at + 1..]
        .iter()
        .any(|&p| seq.token(p) != special::EOS);
    if has_answer {
        1.0
    } else {
        0.0
    }
}

/// Strips trailing end-of-sequence tokens before comparison.
pub fn normalize_answer(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().filter(|t| *t != special::EOS).collect()
}

/// Exact match of normalized answer token sequences.
pub fn accuracy_reward(predicted: &[usize], gold: &[usize]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Usage("gold answer must be non-empty".into()));
    }
    Ok(if normalize_answer(predicted) == normalize_answer(gold) { 1.0 } else { 0.0 })
}

/// Combines the components. A format failure gates the saliency term to
/// zero: without a valid think/answer split the rollout map is undefined.
pub fn overall_reward(accuracy: f64, format: f64, saliency: f64) -> Result<RewardBreakdown> {
    for (name, v, hi) in [("accuracy", accuracy, 1.0), ("format", format, 1.0), ("saliency", saliency, 1.0)] {
        if !(0.0..=hi).contains(&v) {
            return Err(Error::Validation(format!("{} component {} outside [0, {}]", name, v, hi)));
        }
    }
    if accuracy != 0.0 && accuracy != 1.0 {
        return Err(Error::Validation(format!("accuracy must be 0 or 1, got {}", accuracy)));
    }
    if format != 0.0 && format != 1.0 {
        return Err(Error::Validation(format!("format must be 0 or 1, got {}", format)));
    }
    let saliency = if format == 0.0 { 0.0 } else { saliency };
    Ok(RewardBreakdown { accuracy, format, saliency, overall: accuracy + format + saliency })
}
