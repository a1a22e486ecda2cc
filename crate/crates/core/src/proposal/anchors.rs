use super::boxes::{iou, BBox};
use crate::error::{MitosError, Result};

/// Which proposal stage an anchor or proposal belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Rpn1 = 1,
    Rpn2 = 2,
}

impl Stage {
    pub fn number(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    pub row: usize,
    pub col: usize,
    /// Index among the anchors sharing one feature-map position
    /// (`scale_index · n_ratios + ratio_index`).
    pub slot: usize,
    pub stage: Stage,
}

/// One anchor per (position, scale, ratio), in row-major position order with
/// scales outer and ratios inner at each position. Anchors are centered on
/// `((col + 0.5)·stride, (row + 0.5)·stride)`, keep area `scale²` and have
/// `w / h = ratio`. They are not clipped.
pub fn generate_anchors(
    map_h: usize,
    map_w: usize,
    stride: usize,
    scales: &[f64],
    ratios: &[f64],
    stage: Stage,
) -> Result<Vec<Anchor>> {
    if scales.is_empty() || ratios.is_empty() {
        return Err(MitosError::invalid("generate_anchors: scales and ratios must be non-empty"));
    }
    if map_h == 0 || map_w == 0 {
        return Err(MitosError::invalid("generate_anchors: empty feature map"));
    }
    if scales.iter().chain(ratios).any(|&v| !(v > 0.0)) {
        return Err(MitosError::invalid("generate_anchors: scales and ratios must be positive"));
    }
    let s = stride as f64;
    let mut shapes = Vec::with_capacity(scales.len() * ratios.len());
    for &scale in scales {
        for &ratio in ratios {
            let r = ratio.sqrt();
            shapes.push((scale * r, scale / r));
        }
    }
    let mut out = Vec::with_capacity(map_h * map_w * shapes.len());
    for row in 0..map_h {
        for col in 0..map_w {
            let cx = (col as f64 + 0.5) * s;
            let cy = (row as f64 + 0.5) * s;
            for (slot, &(w, h)) in shapes.iter().enumerate() {
                out.push(Anchor {
                    bbox: BBox {
                        x: cx - 0.5 * w,
                        y: cy - 0.5 * h,
                        w,
                        h,
                    },
                    row,
                    col,
                    slot,
                    stage,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the ground-truth box with this index.
    Positive(usize),
    Negative,
    Ignore,
}

impl AnchorLabel {
    pub fn is_positive(self) -> bool {
        matches!(self, AnchorLabel::Positive(_))
    }
}

/// Labels reference boxes against ground truth: max IoU `>= pos_thr` is
/// positive, `< neg_thr` negative, anything between ignored. Each ground-truth
/// box additionally claims the reference box(es) of highest overlap with it.
pub fn assign_anchors(refs: &[BBox], gt: &[BBox], pos_thr: f64, neg_thr: f64) -> Result<Vec<AnchorLabel>> {
    if pos_thr <= neg_thr {
        return Err(MitosError::invalid(format!(
            "assign_anchors: positive threshold {} must exceed negative threshold {}",
            pos_thr, neg_thr
        )));
    }
    if gt.is_empty() {
        return Ok(vec![AnchorLabel::Negative; refs.len()]);
    }
    let mut best_for_gt = vec![0.0f64; gt.len()];
    let mut best = Vec::with_capacity(refs.len());
    for r in refs {
        let mut m = 0.0;
        let mut arg = 0;
        for (g, gb) in gt.iter().enumerate() {
            let v = iou(r, gb);
            if v > m {
                m = v;
                arg = g;
            }
            if v > best_for_gt[g] {
                best_for_gt[g] = v;
            }
        }
        best.push((m, arg));
    }
    let mut labels: Vec<AnchorLabel> = best
        .iter()
        .map(|&(m, arg)| {
            if m >= pos_thr {
                AnchorLabel::Positive(arg)
            } else if m < neg_thr {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    for (i, r) in refs.iter().enumerate() {
        for (g, gb) in gt.iter().enumerate() {
            if best_for_gt[g] > 0.0 && iou(r, gb) == best_for_gt[g] && !labels[i].is_positive() {
                labels[i] = AnchorLabel::Positive(g);
            }
        }
    }
    Ok(labels)
}
