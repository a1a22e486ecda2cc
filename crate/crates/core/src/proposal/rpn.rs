use std::io::Write;

use serde::{Deserialize, Serialize};

use super::anchors::{Anchor, Stage};
use super::boxes::{apply_delta, BBox, BoxDelta};
use super::nms::nms_top_k;
use crate::error::{MitosError, Result};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Upper bound on decoded log-scale offsets, `ln(1000/16)`.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356;

/// RPN₂ slot reading the sliding-window anchor at each fused-map cell.
pub const SLIDING_SLOT: usize = 0;
/// RPN₂ slot re-scoring the RPN₁ proposal snapped to a fused-map cell.
pub const CASCADE_SLOT: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    /// RPN₁ anchor side lengths in px.
    pub rpn1_scales: Vec<f64>,
    /// RPN₁ anchor aspect ratios (w:h).
    pub rpn1_ratios: Vec<f64>,
    /// Side of the square sliding-window anchor on the fused map.
    pub rpn2_window: f64,
    pub nms_threshold: f64,
    pub rpn1_top_k: usize,
    pub rpn2_top_k: usize,
    /// Decoded boxes with a side below this are dropped before NMS.
    pub min_side: f64,
    /// Width of the 3×3 intermediate layer of each RPN head.
    pub head_channels: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// Sampled anchors per image for each RPN loss.
    pub batch_per_image: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            rpn1_scales: vec![16.0, 32.0, 64.0],
            rpn1_ratios: vec![1.0],
            rpn2_window: 64.0,
            nms_threshold: 0.7,
            rpn1_top_k: 300,
            rpn2_top_k: 100,
            min_side: 2.0,
            head_channels: 32,
            pos_iou: 0.7,
            neg_iou: 0.3,
            batch_per_image: 256,
        }
    }
}

impl ProposalConfig {
    /// Three scales × three ratios, 12,321 RPN₁ anchors on a 37×37 map.
    pub fn nine_anchor() -> Self {
        ProposalConfig {
            rpn1_ratios: vec![0.5, 1.0, 2.0],
            ..Default::default()
        }
    }

    pub fn rpn1_anchors_per_position(&self) -> usize {
        self.rpn1_scales.len() * self.rpn1_ratios.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    pub stage: Stage,
}

/// 3×3 conv + ReLU followed by sibling 1×1 convs for objectness (two
/// channels per anchor, softmaxed) and box offsets (four per anchor).
#[derive(Clone, Debug)]
pub struct RpnHead {
    conv_w: ParamId,
    conv_b: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
    reg_w: ParamId,
    reg_b: ParamId,
    anchors_per_pos: usize,
}

/// Head outputs. Objectness channel `2a + 1` is the object probability of
/// slot `a`; offsets of slot `a` occupy channels `4a..4a + 4`.
#[derive(Clone, Copy, Debug)]
pub struct RpnOutput {
    pub objectness: Var,
    pub deltas: Var,
}

impl RpnHead {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        mid: usize,
        anchors_per_pos: usize,
    ) -> Result<Self> {
        let p = |s: &str| format!("{}/{}", prefix, s);
        Ok(RpnHead {
            conv_w: store.register(p("conv/weight"), &[mid, in_channels, 3, 3], ParamKind::Weight { fan_in: in_channels * 9 })?,
            conv_b: store.register(p("conv/bias"), &[mid], ParamKind::Bias)?,
            cls_w: store.register(p("cls/weight"), &[anchors_per_pos * 2, mid, 1, 1], ParamKind::Weight { fan_in: mid })?,
            cls_b: store.register(p("cls/bias"), &[anchors_per_pos * 2], ParamKind::Bias)?,
            reg_w: store.register(p("reg/weight"), &[anchors_per_pos * 4, mid, 1, 1], ParamKind::Weight { fan_in: mid })?,
            reg_b: store.register(p("reg/bias"), &[anchors_per_pos * 4], ParamKind::Bias)?,
            anchors_per_pos,
        })
    }

    pub fn anchors_per_pos(&self) -> usize {
        self.anchors_per_pos
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.conv_w, self.conv_b, self.cls_w, self.cls_b, self.reg_w, self.reg_b]
    }

    pub fn reg_param_ids(&self) -> [ParamId; 2] {
        [self.reg_w, self.reg_b]
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, map: Var) -> Result<RpnOutput> {
        let h = tape.conv2d(map, p.var(self.conv_w), Some(p.var(self.conv_b)), 1, 1)?;
        let h = tape.relu(h);
        let logits = tape.conv2d(h, p.var(self.cls_w), Some(p.var(self.cls_b)), 1, 0)?;
        let objectness = tape.grouped_channel_softmax(logits, 2)?;
        let deltas = tape.conv2d(h, p.var(self.reg_w), Some(p.var(self.reg_b)), 1, 0)?;
        Ok(RpnOutput { objectness, deltas })
    }
}

/// Flat index of slot `slot`'s object probability at `(row, col)`.
pub fn objectness_index(slot: usize, row: usize, col: usize, h: usize, w: usize) -> usize {
    ((slot * 2 + 1) * h + row) * w + col
}

/// Flat indices of the objectness pair (background, object) of a slot.
pub fn objectness_pair(slot: usize, row: usize, col: usize, h: usize, w: usize) -> [usize; 2] {
    [((slot * 2) * h + row) * w + col, objectness_index(slot, row, col, h, w)]
}

/// Flat indices of slot `slot`'s four offsets at `(row, col)`.
pub fn delta_indices(slot: usize, row: usize, col: usize, h: usize, w: usize) -> [usize; 4] {
    std::array::from_fn(|j| ((slot * 4 + j) * h + row) * w + col)
}

/// A reference box evaluated by an RPN head at one cell and slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub reference: BBox,
    pub slot: usize,
    pub row: usize,
    pub col: usize,
}

impl From<&Anchor> for Candidate {
    fn from(a: &Anchor) -> Self {
        Candidate {
            reference: a.bbox,
            slot: a.slot,
            row: a.row,
            col: a.col,
        }
    }
}

/// RPN₂ candidate set: RPN₁ proposals snapped to the fused-map cell that
/// contains their center (cascade slot), followed by the sliding-window anchors.
pub fn rpn2_candidates(rpn1: &[Proposal], sliding: &[Anchor], map_h: usize, map_w: usize, stride: usize) -> Vec<Candidate> {
    let s = stride as f64;
    let mut out = Vec::with_capacity(rpn1.len() + sliding.len());
    for p in rpn1 {
        let (cx, cy) = p.bbox.center();
        let col = ((cx / s).floor().max(0.0) as usize).min(map_w - 1);
        let row = ((cy / s).floor().max(0.0) as usize).min(map_h - 1);
        out.push(Candidate {
            reference: p.bbox,
            slot: CASCADE_SLOT,
            row,
            col,
        });
    }
    out.extend(sliding.iter().map(Candidate::from));
    out
}

/// Decodes, clips, filters and suppresses candidates scored by one RPN head.
pub fn propose(
    objectness: &Tensor,
    deltas: &Tensor,
    candidates: &[Candidate],
    cfg: &ProposalConfig,
    top_k: usize,
    image_size: f64,
    stage: Stage,
) -> Result<Vec<Proposal>> {
    let (_, h, w) = objectness.dims3("propose")?;
    if deltas.shape()[1..] != [h, w] {
        return Err(MitosError::shape("propose", format!("deltas {}x{}", h, w), format!("{:?}", deltas.shape())));
    }
    let od = objectness.data();
    let dd = deltas.data();
    let mut boxes = Vec::with_capacity(candidates.len());
    let mut scores = Vec::with_capacity(candidates.len());
    for c in candidates {
        let d = delta_indices(c.slot, c.row, c.col, h, w).map(|i| dd[i]);
        let delta = BoxDelta {
            tx: d[0],
            ty: d[1],
            tw: d[2].min(MAX_LOG_SCALE),
            th: d[3].min(MAX_LOG_SCALE),
        };
        let Ok(decoded) = apply_delta(&c.reference, &delta) else { continue };
        let Some(clipped) = decoded.clip(image_size, image_size) else { continue };
        if clipped.w < cfg.min_side || clipped.h < cfg.min_side {
            continue;
        }
        boxes.push(clipped);
        scores.push(od[objectness_index(c.slot, c.row, c.col, h, w)]);
    }
    let keep = nms_top_k(&boxes, &scores, cfg.nms_threshold, top_k)?;
    Ok(keep
        .into_iter()
        .map(|i| Proposal {
            bbox: boxes[i],
            objectness: scores[i],
            stage,
        })
        .collect())
}

/// One line per proposal: `x y w h score stage`.
pub fn write_proposals<W: Write>(out: &mut W, proposals: &[Proposal]) -> std::io::Result<()> {
    for p in proposals {
        writeln!(
            out,
            "{:.4} {:.4} {:.4} {:.4} {:.6} {}",
            p.bbox.x,
            p.bbox.y,
            p.bbox.w,
            p.bbox.h,
            p.objectness,
            p.stage.number()
        )?;
    }
    Ok(())
}
