use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::head::{argmax_class, DetectionHead, HeadConfig};
use super::loss::{multitask_loss_tape, sample_minibatch, LossBreakdown, DEFAULT_LAMBDA};
use super::roi::roi_pool_tape;
use super::{ClassId, Detection, NUM_CLASSES};
use crate::backbone::{Backbone, BackboneConfig, CONV3_STRIDE, CONV4_STRIDE};
use crate::data::BoxAnnotation;
use crate::error::{MitosError, Result};
use crate::optim::{he_init, init_weights};
use crate::params::{Bound, ParamStore};
use crate::proposal::rpn::{delta_indices, objectness_pair, MAX_LOG_SCALE};
use crate::proposal::{
    apply_delta, assign_anchors, encode_delta, generate_anchors, iou, nms, propose, rpn2_candidates, Anchor,
    AnchorLabel, BBox, BoxDelta, Candidate, Fusion, FusionConfig, Proposal, ProposalConfig, RpnHead, RpnOutput,
    Stage, FUSED_CHANNELS,
};
use crate::tensor::{Checkpoint, Tape, Tensor, Var};

/// Checkpoint metadata key holding the TOML network configuration.
pub const CONFIG_META_KEY: &str = "net_config";
/// Standard deviation of the Gaussian initialization outside the backbone.
pub const DEFAULT_INIT_SIGMA: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub score_threshold: f64,
    /// IoU threshold of the per-class suppression of final detections.
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_threshold: 0.5,
            nms_threshold: 0.3,
            max_detections: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub proposal: ProposalConfig,
    pub head: HeadConfig,
    pub detect: DetectConfig,
    pub lambda: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            backbone: BackboneConfig::default(),
            fusion: FusionConfig::default(),
            proposal: ProposalConfig::default(),
            head: HeadConfig::default(),
            detect: DetectConfig::default(),
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl NetConfig {
    /// A configuration small enough to train in minutes on one CPU core.
    pub fn desk() -> Self {
        NetConfig {
            backbone: BackboneConfig {
                stage_channels: vec![8, 16, 24, 32],
                convs_per_stage: vec![1, 1, 2, 2],
                ..Default::default()
            },
            proposal: ProposalConfig {
                head_channels: 8,
                batch_per_image: 64,
                ..Default::default()
            },
            head: HeadConfig {
                hidden: 64,
                rois_per_image: 32,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let p = &self.proposal;
        if p.rpn1_scales.is_empty() || p.rpn1_ratios.is_empty() {
            return Err(MitosError::invalid("RPN1 needs at least one scale and one ratio"));
        }
        if !(p.rpn2_window > 0.0) || p.head_channels == 0 || p.batch_per_image == 0 {
            return Err(MitosError::invalid("RPN2 window, head width and batch must be positive"));
        }
        if !(0.0..=1.0).contains(&p.nms_threshold) || !(0.0..=1.0).contains(&self.detect.nms_threshold) {
            return Err(MitosError::invalid("NMS thresholds must lie in [0, 1]"));
        }
        if self.head.hidden == 0 || self.head.pool_size == 0 || self.head.rois_per_image == 0 {
            return Err(MitosError::invalid("head width, pool size and ROI batch must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(MitosError::invalid(format!("lambda {} must be non-negative", self.lambda)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MitosError::Config(e.to_string()))
    }
}

/// Sampled references of one loss site with their labels and offset targets.
#[derive(Clone, Debug, Default, PartialEq)]
struct SiteSample {
    idx: Vec<usize>,
    labels: Vec<usize>,
    targets: Vec<BoxDelta>,
}

/// Every non-differentiable choice made during one training forward pass:
/// sampled anchors, proposals and their targets. Replaying a plan makes the
/// loss a smooth function of the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepPlan {
    rpn1: SiteSample,
    rpn1_proposals: Vec<Proposal>,
    rpn2: SiteSample,
    rois: Vec<BBox>,
    head: SiteSample,
}

impl StepPlan {
    pub fn rpn1_proposals(&self) -> &[Proposal] {
        &self.rpn1_proposals
    }

    pub fn sampled_rois(&self) -> &[BBox] {
        &self.rois
    }
}

/// Loss of one image at each of the three sites.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub rpn1: LossBreakdown,
    pub rpn2: LossBreakdown,
    pub head: LossBreakdown,
    pub total: f64,
}

impl StepLoss {
    pub fn cls(&self) -> f64 {
        self.rpn1.cls_term + self.rpn2.cls_term + self.head.cls_term
    }

    pub fn reg(&self) -> f64 {
        self.rpn1.reg_term + self.rpn2.reg_term + self.head.reg_term
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepProposals {
    pub rpn1: Vec<Proposal>,
    pub rpn2: Vec<Proposal>,
}

/// Backbone, fusion, both RPN heads and the detection head over one
/// parameter store.
#[derive(Clone, Debug)]
pub struct MitosNet {
    config: NetConfig,
    store: ParamStore,
    backbone: Backbone,
    fusion: Fusion,
    rpn1: RpnHead,
    rpn2: RpnHead,
    head: DetectionHead,
    rpn1_refs: Vec<Candidate>,
    rpn2_sliding: Vec<Anchor>,
}

struct Trunk {
    fused: Var,
    rpn1: RpnOutput,
    rpn2: Option<RpnOutput>,
}

impl MitosNet {
    /// Registers every layer and initializes it from `seed`, with
    /// [`DEFAULT_INIT_SIGMA`] outside the backbone.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        let mut net = Self::uninitialized(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        net.initialize(&mut rng, DEFAULT_INIT_SIGMA)?;
        Ok(net)
    }

    fn uninitialized(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let bc = &config.backbone;
        let pc = &config.proposal;
        let mut store = ParamStore::new();
        let backbone = Backbone::register(bc.clone(), &mut store)?;
        let fusion = Fusion::register(&mut store, bc.conv3_channels(), bc.conv4_channels(), &config.fusion)?;
        let rpn1 = RpnHead::register(
            &mut store,
            "rpn1",
            bc.conv4_channels(),
            pc.head_channels,
            pc.rpn1_anchors_per_position(),
        )?;
        let rpn2 = RpnHead::register(&mut store, "rpn2", FUSED_CHANNELS, pc.head_channels, 2)?;
        let ps = config.head.pool_size;
        let head = DetectionHead::register(&mut store, FUSED_CHANNELS * ps * ps, config.head.hidden)?;
        let (s4, s3) = (bc.conv4_size(), bc.conv3_size());
        let rpn1_refs = generate_anchors(s4, s4, CONV4_STRIDE, &pc.rpn1_scales, &pc.rpn1_ratios, Stage::Rpn1)?
            .iter()
            .map(Candidate::from)
            .collect();
        let rpn2_sliding = generate_anchors(s3, s3, CONV3_STRIDE, &[pc.rpn2_window], &[1.0], Stage::Rpn2)?;
        Ok(MitosNet {
            config,
            store,
            backbone,
            fusion,
            rpn1,
            rpn2,
            head,
            rpn1_refs,
            rpn2_sliding,
        })
    }

    /// Backbone per its own scheme, the head's ReLU body layers He-scaled,
    /// every other layer from `N(0, sigma²)`.
    pub fn initialize<R: Rng + ?Sized>(&mut self, rng: &mut R, sigma: f64) -> Result<()> {
        let mut chacha = ChaCha8Rng::seed_from_u64(rng.random());
        self.backbone.initialize(&mut self.store, &mut chacha)?;
        he_init(&mut self.store, self.head.body_param_ids(), &mut chacha)?;
        let rest = self
            .fusion
            .param_ids()
            .into_iter()
            .chain(self.rpn1.param_ids())
            .chain(self.rpn2.param_ids())
            .chain(self.head.output_param_ids());
        init_weights(&mut self.store, rest, sigma, rng)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Replaces the post-processing thresholds used by [`Self::detect`].
    pub fn set_detect_config(&mut self, detect: DetectConfig) {
        self.config.detect = detect;
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn input_size(&self) -> usize {
        self.config.backbone.input_size
    }

    pub fn rpn1_anchor_count(&self) -> usize {
        self.rpn1_refs.len()
    }

    pub fn rpn2_sliding_anchors(&self) -> &[Anchor] {
        &self.rpn2_sliding
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn head(&self) -> &DetectionHead {
        &self.head
    }

    pub fn rpn_heads(&self) -> (&RpnHead, &RpnHead) {
        (&self.rpn1, &self.rpn2)
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let n = self.input_size();
        if image.shape() != [3, n, n] {
            return Err(MitosError::shape("detect", format!("[3, {}, {}]", n, n), format!("{:?}", image.shape())));
        }
        Ok(())
    }

    fn trunk(&self, tape: &mut Tape, p: &Bound, image: &Tensor) -> Result<Trunk> {
        self.check_image(image)?;
        let x = tape.constant(image.clone());
        let f = self.backbone.forward(tape, p, x)?;
        let rpn1 = self.rpn1.forward(tape, p, f.conv4)?;
        let fused = self.fusion.forward(tape, p, f.conv3, f.conv4)?.fused;
        Ok(Trunk { fused, rpn1, rpn2: None })
    }

    fn proposals(&self, tape: &Tape, out: &RpnOutput, cands: &[Candidate], top_k: usize, stage: Stage) -> Result<Vec<Proposal>> {
        propose(
            tape.value(out.objectness),
            tape.value(out.deltas),
            cands,
            &self.config.proposal,
            top_k,
            self.input_size() as f64,
            stage,
        )
    }

    fn rpn2_cands(&self, rpn1: &[Proposal]) -> Vec<Candidate> {
        let s = self.config.backbone.conv3_size();
        rpn2_candidates(rpn1, &self.rpn2_sliding, s, s, CONV3_STRIDE)
    }

    /// Both proposal stages for one image.
    pub fn propose(&self, image: &Tensor) -> Result<StepProposals> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let (_, props) = self.run_proposals(&mut tape, &p, image)?;
        Ok(props)
    }

    fn run_proposals(&self, tape: &mut Tape, p: &Bound, image: &Tensor) -> Result<(Trunk, StepProposals)> {
        let mut t = self.trunk(tape, p, image)?;
        let pc = &self.config.proposal;
        let rpn1 = self.proposals(tape, &t.rpn1, &self.rpn1_refs, pc.rpn1_top_k, Stage::Rpn1)?;
        let o2 = self.rpn2.forward(tape, p, t.fused)?;
        t.rpn2 = Some(o2);
        let rpn2 = self.proposals(tape, &o2, &self.rpn2_cands(&rpn1), pc.rpn2_top_k, Stage::Rpn2)?;
        Ok((t, StepProposals { rpn1, rpn2 }))
    }

    /// Full inference: proposals, ROI pooling, head, per-class offsets of the
    /// argmax class, score threshold, per-class NMS, `max_detections` cap.
    /// Sorted by descending score.
    pub fn detect(&self, image: &Tensor) -> Result<Vec<Detection>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let (t, props) = self.run_proposals(&mut tape, &p, image)?;
        if props.rpn2.is_empty() {
            return Ok(Vec::new());
        }
        let rois: Vec<BBox> = props.rpn2.iter().map(|q| q.bbox).collect();
        let ps = self.config.head.pool_size;
        let pooled = roi_pool_tape(&mut tape, t.fused, &rois, CONV3_STRIDE as f64, ps, ps)?;
        let out = self.head.forward(&mut tape, &p, pooled)?;
        Ok(select_detections(
            tape.value(out.probs).data(),
            tape.value(out.deltas).data(),
            &rois,
            &self.config.detect,
            self.input_size() as f64,
        ))
    }

    /// Records the summed three-site loss of one annotated image on `tape`.
    ///
    /// Without `frozen`, sampling draws from `rng` and the choices are
    /// returned as a [`StepPlan`]; with it, those choices are replayed.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        image: &Tensor,
        gts: &[BoxAnnotation],
        rng: &mut R,
        frozen: Option<&StepPlan>,
    ) -> Result<(Var, StepLoss, StepPlan)> {
        let pc = &self.config.proposal;
        let hc = &self.config.head;
        let lambda = self.config.lambda;
        let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
        let mut plan = StepPlan::default();
        let mut loss = StepLoss::default();
        let mut terms = Vec::with_capacity(3);

        let mut t = self.trunk(tape, p, image)?;
        plan.rpn1 = match frozen {
            Some(f) => f.rpn1.clone(),
            None => {
                let refs: Vec<BBox> = self.rpn1_refs.iter().map(|c| c.reference).collect();
                sample_site(&refs, &gt_boxes, |_| 1, pc.pos_iou, pc.neg_iou, pc.batch_per_image, rng)?
            }
        };
        if let Some((v, b)) = rpn_site_loss(tape, &t.rpn1, &self.rpn1_refs, &plan.rpn1, lambda)? {
            terms.push(v);
            loss.rpn1 = b;
        }

        plan.rpn1_proposals = match frozen {
            Some(f) => f.rpn1_proposals.clone(),
            None => self.proposals(tape, &t.rpn1, &self.rpn1_refs, pc.rpn1_top_k, Stage::Rpn1)?,
        };
        let o2 = self.rpn2.forward(tape, p, t.fused)?;
        t.rpn2 = Some(o2);
        let cands2 = self.rpn2_cands(&plan.rpn1_proposals);
        plan.rpn2 = match frozen {
            Some(f) => f.rpn2.clone(),
            None => {
                let refs: Vec<BBox> = cands2.iter().map(|c| c.reference).collect();
                sample_site(&refs, &gt_boxes, |_| 1, pc.pos_iou, pc.neg_iou, pc.batch_per_image, rng)?
            }
        };
        if let Some((v, b)) = rpn_site_loss(tape, &o2, &cands2, &plan.rpn2, lambda)? {
            terms.push(v);
            loss.rpn2 = b;
        }

        match frozen {
            Some(f) => {
                plan.rois = f.rois.clone();
                plan.head = f.head.clone();
            }
            None => {
                let mut rois: Vec<BBox> = self
                    .proposals(tape, &o2, &cands2, pc.rpn2_top_k, Stage::Rpn2)?
                    .iter()
                    .map(|q| q.bbox)
                    .collect();
                rois.extend(&gt_boxes);
                let labels = label_rois(&rois, &gt_boxes, hc.fg_iou, hc.bg_iou);
                let class_of = |g: usize| gts[g].class_id.index();
                let site = site_from_labels(&labels, &rois, &gt_boxes, class_of, hc.rois_per_image, rng)?;
                plan.rois = site.idx.iter().map(|&i| rois[i]).collect();
                plan.head = SiteSample {
                    idx: (0..site.idx.len()).collect(),
                    ..site
                };
            }
        }
        if !plan.rois.is_empty() {
            let ps = hc.pool_size;
            let pooled = roi_pool_tape(tape, t.fused, &plan.rois, CONV3_STRIDE as f64, ps, ps)?;
            let out = self.head.forward(tape, p, pooled)?;
            let idx = plan
                .head
                .labels
                .iter()
                .enumerate()
                .flat_map(|(r, &l)| (0..4).map(move |j| r * NUM_CLASSES * 4 + l * 4 + j))
                .collect();
            let picked = tape.gather(out.deltas, idx, &[plan.rois.len(), 4])?;
            let n = plan.rois.len();
            let (v, b) = multitask_loss_tape(tape, out.probs, &plan.head.labels, picked, &plan.head.targets, n, n, lambda)?;
            terms.push(v);
            loss.head = b;
        }

        let mut total = terms[0];
        for &v in &terms[1..] {
            total = tape.add(total, v)?;
        }
        loss.total = tape.value(total).item();
        Ok((total, loss, plan))
    }

    /// Parameters plus the network configuration under [`CONFIG_META_KEY`].
    pub fn to_checkpoint(&self, mut meta: Vec<(String, String)>) -> Checkpoint {
        meta.insert(0, (CONFIG_META_KEY.to_string(), self.config.to_toml()));
        self.store.to_checkpoint(meta)
    }

    /// Rebuilds a network from a checkpoint written by [`Self::to_checkpoint`].
    /// Optimizer state stored alongside (`optim/…`) is skipped.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let text = ckpt
            .meta_value(CONFIG_META_KEY)
            .ok_or_else(|| MitosError::invalid("checkpoint carries no network configuration"))?;
        let mut net = Self::uninitialized(NetConfig::from_toml(text)?)?;
        net.store.load_checkpoint(ckpt, "optim/")?;
        Ok(net)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn sample_site<R: Rng + ?Sized>(
    refs: &[BBox],
    gt: &[BBox],
    class_of: impl Fn(usize) -> usize,
    pos: f64,
    neg: f64,
    size: usize,
    rng: &mut R,
) -> Result<SiteSample> {
    let labels = assign_anchors(refs, gt, pos, neg)?;
    site_from_labels(&labels, refs, gt, class_of, size, rng)
}

fn site_from_labels<R: Rng + ?Sized>(
    labels: &[AnchorLabel],
    refs: &[BBox],
    gt: &[BBox],
    class_of: impl Fn(usize) -> usize,
    size: usize,
    rng: &mut R,
) -> Result<SiteSample> {
    let idx = sample_minibatch(labels, size, rng)?;
    let mut out = SiteSample {
        labels: Vec::with_capacity(idx.len()),
        targets: Vec::with_capacity(idx.len()),
        idx: Vec::new(),
    };
    for &i in &idx {
        match labels[i] {
            AnchorLabel::Positive(g) => {
                out.labels.push(class_of(g));
                out.targets.push(encode_delta(&refs[i], &gt[g])?);
            }
            _ => {
                out.labels.push(0);
                out.targets.push(BoxDelta::default());
            }
        }
    }
    out.idx = idx;
    Ok(out)
}

/// ROI labels by best IoU: `>= fg` takes that box's class, `< bg` is background.
fn label_rois(rois: &[BBox], gt: &[BBox], fg: f64, bg: f64) -> Vec<AnchorLabel> {
    rois.iter()
        .map(|r| {
            let mut best = (0.0, 0);
            for (g, b) in gt.iter().enumerate() {
                let v = iou(r, b);
                if v > best.0 {
                    best = (v, g);
                }
            }
            if best.0 >= fg && !gt.is_empty() {
                AnchorLabel::Positive(best.1)
            } else if best.0 < bg {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect()
}

fn rpn_site_loss(
    tape: &mut Tape,
    out: &RpnOutput,
    cands: &[Candidate],
    site: &SiteSample,
    lambda: f64,
) -> Result<Option<(Var, LossBreakdown)>> {
    if site.idx.is_empty() {
        return Ok(None);
    }
    let shape = tape.value(out.objectness).shape();
    let (h, w) = (shape[1], shape[2]);
    let s = site.idx.len();
    let mut pi = Vec::with_capacity(2 * s);
    let mut di = Vec::with_capacity(4 * s);
    for &i in &site.idx {
        let c = &cands[i];
        pi.extend(objectness_pair(c.slot, c.row, c.col, h, w));
        di.extend(delta_indices(c.slot, c.row, c.col, h, w));
    }
    let probs = tape.gather(out.objectness, pi, &[s, 2])?;
    let deltas = tape.gather(out.deltas, di, &[s, 4])?;
    multitask_loss_tape(tape, probs, &site.labels, deltas, &site.targets, s, s, lambda).map(Some)
}

/// Turns head outputs over `rois` into final detections.
pub(crate) fn select_detections(probs: &[f64], deltas: &[f64], rois: &[BBox], cfg: &DetectConfig, image_size: f64) -> Vec<Detection> {
    let mut per_class: [Vec<Detection>; NUM_CLASSES] = Default::default();
    for (r, roi) in rois.iter().enumerate() {
        let row = &probs[r * NUM_CLASSES..(r + 1) * NUM_CLASSES];
        let class_id = argmax_class(row);
        if class_id == ClassId::Background || row[class_id.index()] < cfg.score_threshold {
            continue;
        }
        let k = class_id.index();
        let d = &deltas[r * NUM_CLASSES * 4 + 4 * k..r * NUM_CLASSES * 4 + 4 * k + 4];
        let delta = BoxDelta {
            tx: d[0],
            ty: d[1],
            tw: d[2].min(MAX_LOG_SCALE),
            th: d[3].min(MAX_LOG_SCALE),
        };
        let Ok(b) = apply_delta(roi, &delta) else { continue };
        let Some(b) = b.clip(image_size, image_size) else { continue };
        per_class[k].push(Detection {
            bbox: b,
            class_id,
            score: row[k],
        });
    }
    let mut out = Vec::new();
    for dets in per_class.iter().skip(1) {
        let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        let keep = nms(&boxes, &scores, cfg.nms_threshold).expect("threshold validated");
        out.extend(keep.into_iter().map(|i| dets[i]));
    }
    // stable: equal scores keep class-then-NMS order
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(cfg.max_detections);
    out
}
