use serde::{Deserialize, Serialize};

use super::{ClassId, NUM_CLASSES};
use crate::error::{MitosError, Result};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::proposal::BoxDelta;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Width of both fully-connected body layers.
    pub hidden: usize,
    /// ROI pooling output is `pool_size × pool_size`.
    pub pool_size: usize,
    /// Sampled ROIs per image for the head loss.
    pub rois_per_image: usize,
    /// ROIs with IoU at least this against a ground-truth box take its class.
    pub fg_iou: f64,
    /// ROIs below this IoU with every ground-truth box are background.
    pub bg_iou: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 256,
            pool_size: 7,
            rois_per_image: 64,
            fg_iou: 0.5,
            bg_iou: 0.5,
        }
    }
}

/// Flatten → FC + ReLU → FC + ReLU → sibling `FC_cls` (softmax over the
/// three classes) and `FC_reg` (four offsets per class).
#[derive(Clone, Debug)]
pub struct DetectionHead {
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
    reg_w: ParamId,
    reg_b: ParamId,
    in_features: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[R, 3]` class probabilities.
    pub probs: Var,
    /// `[R, 12]` offsets, class `k` in columns `4k..4k + 4`.
    pub deltas: Var,
}

impl DetectionHead {
    pub fn register(store: &mut ParamStore, in_features: usize, hidden: usize) -> Result<Self> {
        let w = |fan_in| ParamKind::Weight { fan_in };
        Ok(DetectionHead {
            fc1_w: store.register("head/fc1/weight", &[hidden, in_features], w(in_features))?,
            fc1_b: store.register("head/fc1/bias", &[hidden], ParamKind::Bias)?,
            fc2_w: store.register("head/fc2/weight", &[hidden, hidden], w(hidden))?,
            fc2_b: store.register("head/fc2/bias", &[hidden], ParamKind::Bias)?,
            cls_w: store.register("head/cls/weight", &[NUM_CLASSES, hidden], w(hidden))?,
            cls_b: store.register("head/cls/bias", &[NUM_CLASSES], ParamKind::Bias)?,
            reg_w: store.register("head/reg/weight", &[NUM_CLASSES * 4, hidden], w(hidden))?,
            reg_b: store.register("head/reg/bias", &[NUM_CLASSES * 4], ParamKind::Bias)?,
            in_features,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b, self.cls_w, self.cls_b, self.reg_w, self.reg_b,
        ]
    }

    /// The two ReLU body layers.
    pub fn body_param_ids(&self) -> Vec<ParamId> {
        vec![self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]
    }

    /// The sibling classification and regression layers.
    pub fn output_param_ids(&self) -> Vec<ParamId> {
        vec![self.cls_w, self.cls_b, self.reg_w, self.reg_b]
    }

    /// `rois: [R, in_features]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, rois: Var) -> Result<HeadOutput> {
        let shape = tape.value(rois).shape();
        if shape.len() != 2 || shape[1] != self.in_features {
            return Err(MitosError::shape(
                "head_forward",
                format!("[R, {}]", self.in_features),
                format!("{:?}", shape),
            ));
        }
        let h = tape.fully_connected(rois, p.var(self.fc1_w), p.var(self.fc1_b))?;
        let h = tape.relu(h);
        let h = tape.fully_connected(h, p.var(self.fc2_w), p.var(self.fc2_b))?;
        let h = tape.relu(h);
        let logits = tape.fully_connected(h, p.var(self.cls_w), p.var(self.cls_b))?;
        let probs = tape.softmax(logits)?;
        let deltas = tape.fully_connected(h, p.var(self.reg_w), p.var(self.reg_b))?;
        Ok(HeadOutput { probs, deltas })
    }
}

/// Value-level head evaluation of one pooled ROI feature (any shape whose
/// element count matches the head input).
pub fn head_forward(roi_feat: &Tensor, head: &DetectionHead, store: &ParamStore) -> Result<([f64; NUM_CLASSES], [BoxDelta; NUM_CLASSES])> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let flat = roi_feat.clone().reshape(&[1, roi_feat.numel()])?;
    let x = tape.constant(flat);
    let out = head.forward(&mut tape, &p, x)?;
    let probs = tape.value(out.probs).data();
    let deltas = tape.value(out.deltas).data();
    Ok((
        std::array::from_fn(|k| probs[k]),
        std::array::from_fn(|k| BoxDelta::from_slice(&deltas[4 * k..4 * k + 4])),
    ))
}

/// Most probable class of one probability row; ties go to the lower id.
pub fn argmax_class(probs: &[f64]) -> ClassId {
    let mut best = 0;
    for k in 1..probs.len() {
        if probs[k] > probs[best] {
            best = k;
        }
    }
    ClassId::from_index(best).expect("three classes")
}
