use std::cmp::Ordering;

use super::boxes::{iou, BBox};
use crate::error::{MitosError, Result};

/// Greedy non-maximum suppression.
///
/// Boxes are visited in descending score order (ties: lower index first); a
/// box is dropped iff its IoU with an already kept box exceeds `threshold`.
/// Returns kept indices in visiting order.
pub fn nms(boxes: &[BBox], scores: &[f64], threshold: f64) -> Result<Vec<usize>> {
    nms_top_k(boxes, scores, threshold, usize::MAX)
}

/// [`nms`] that stops once `max_keep` boxes survive. Because selection is
/// greedy in score order, the result is the first `max_keep` entries of the
/// full run.
pub fn nms_top_k(boxes: &[BBox], scores: &[f64], threshold: f64, max_keep: usize) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(MitosError::shape("nms", format!("{} scores", boxes.len()), scores.len()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(MitosError::invalid(format!("nms threshold {} outside [0, 1]", threshold)));
    }
    let order = score_order(scores);
    let mut keep: Vec<usize> = Vec::new();
    for &i in &order {
        if keep.len() >= max_keep {
            break;
        }
        let bi = &boxes[i];
        if keep.iter().all(|&k| iou(&boxes[k], bi) <= threshold) {
            keep.push(i);
        }
    }
    Ok(keep)
}

/// Indices sorted by descending score, ties broken by ascending index.
pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}
