//! Anchors, box offsets, NMS, feature fusion and the two cascaded RPN heads.

pub mod anchors;
pub mod boxes;
pub mod fusion;
pub mod nms;
pub mod rpn;

pub use anchors::{assign_anchors, generate_anchors, Anchor, AnchorLabel, Stage};
pub use boxes::{apply_delta, encode_delta, iou, BBox, BoxDelta};
pub use fusion::{fuse_features, FusedFeatures, Fusion, FusionConfig, FUSED_CHANNELS};
pub use nms::{nms, nms_top_k};
pub use rpn::{propose, rpn2_candidates, write_proposals, Candidate, Proposal, ProposalConfig, RpnHead, RpnOutput};
