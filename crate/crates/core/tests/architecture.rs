//! Feature-map shapes, proposal decoding, the detection output contract and
//! the structure of the two-term loss.

use mitos_rcnn::backbone::{build_backbone, BackboneConfig, MIN_DETECTABLE_SIZE_PX};
use mitos_rcnn::detection::{multitask_loss, ClassId, MitosNet, NetConfig};
use mitos_rcnn::proposal::{generate_anchors, iou, BBox, BoxDelta, Stage, FUSED_CHANNELS};
use mitos_rcnn::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![3, 299, 299], (0..3 * 299 * 299).map(|_| rng.random()).collect()).unwrap()
}

fn set_param(net: &mut MitosNet, name: &str, values: &[f64]) {
    let id = net.store().id(name).unwrap_or_else(|| panic!("no parameter {}", name));
    let t = net.store_mut().get_mut(id);
    let fill: Vec<f64> = (0..t.numel()).map(|i| values[i % values.len()]).collect();
    t.data_mut().copy_from_slice(&fill);
}

#[test]
fn feature_map_shapes() {
    let net = MitosNet::new(NetConfig::desk(), 1).unwrap();
    let mut tape = Tape::new();
    let p = net.store().bind(&mut tape);
    let x = tape.constant(image(0));
    let f = net.backbone().forward(&mut tape, &p, x).unwrap();
    let c = net.config().backbone.conv3_channels();
    let c4 = net.config().backbone.conv4_channels();
    assert_eq!(tape.value(f.conv3).shape(), &[c, 74, 74]);
    assert_eq!(tape.value(f.conv4).shape(), &[c4, 37, 37]);
    let fused = net.fusion().forward(&mut tape, &p, f.conv3, f.conv4).unwrap().fused;
    assert_eq!(FUSED_CHANNELS, 256);
    assert_eq!(tape.value(fused).shape(), &[256, 74, 74]);
}

#[test]
fn no_fifth_stage() {
    let cfg = BackboneConfig {
        stage_channels: vec![4, 4, 4, 4, 4],
        convs_per_stage: vec![1, 1, 1, 1, 1],
        ..Default::default()
    };
    assert!(build_backbone(cfg, 0).is_err());
    let names: Vec<&str> = MIN_DETECTABLE_SIZE_PX.iter().map(|(n, _)| *n).collect();
    let sizes: Vec<f64> = MIN_DETECTABLE_SIZE_PX.iter().map(|(_, s)| *s).collect();
    assert_eq!(names, ["conv_3", "conv_4", "conv_5"]);
    assert_eq!(sizes, [15.0, 22.0, 44.0]);
    let (bb, store) = build_backbone(BackboneConfig::default(), 0).unwrap();
    assert!(store.iter().all(|(n, _)| !n.contains("stage5")));
    assert_eq!(bb.config().stage_channels.len(), 4);
}

#[test]
fn wrong_input_size_is_rejected() {
    let net = MitosNet::new(NetConfig::desk(), 1).unwrap();
    assert!(net.detect(&Tensor::zeros(&[3, 300, 300])).is_err());
    assert!(net.detect(&Tensor::zeros(&[1, 299, 299])).is_err());
}

#[test]
fn zero_regression_weights_propose_clipped_anchors() {
    let mut net = MitosNet::new(NetConfig::desk(), 2).unwrap();
    set_param(&mut net, "rpn1/reg/weight", &[0.0]);
    set_param(&mut net, "rpn1/reg/bias", &[0.0]);
    let pc = net.config().proposal.clone();
    let anchors: Vec<BBox> = generate_anchors(37, 37, 8, &pc.rpn1_scales, &pc.rpn1_ratios, Stage::Rpn1)
        .unwrap()
        .iter()
        .filter_map(|a| a.bbox.clip(299.0, 299.0))
        .collect();
    let props = net.propose(&image(3)).unwrap();
    assert!(!props.rpn1.is_empty() && props.rpn1.len() <= pc.rpn1_top_k);
    for p in &props.rpn1 {
        assert!(anchors.iter().any(|a| *a == p.bbox), "{:?} is not a clipped anchor", p.bbox);
        assert_eq!(p.stage, Stage::Rpn1);
    }
    for w in props.rpn1.windows(2) {
        assert!(w[0].objectness >= w[1].objectness);
    }
}

#[test]
fn rpn2_runs_without_rpn1_proposals() {
    let mut cfg = NetConfig::desk();
    cfg.proposal.rpn1_top_k = 0;
    let net = MitosNet::new(cfg, 4).unwrap();
    let props = net.propose(&image(5)).unwrap();
    assert!(props.rpn1.is_empty());
    assert!(!props.rpn2.is_empty());
    assert!(props.rpn2.iter().all(|p| p.stage == Stage::Rpn2));
    net.detect(&image(5)).unwrap();
}

#[test]
fn detection_output_contract() {
    let mut net = MitosNet::new(NetConfig::desk(), 6).unwrap();
    // push every ROI towards a confident foreground class with shifted boxes
    set_param(&mut net, "head/cls/bias", &[0.0, 4.0, 3.5]);
    set_param(&mut net, "head/reg/bias", &[0.3, -0.2, 0.5, -0.4]);
    let img = image(7);
    let all = net.detect(&img).unwrap();
    assert!(!all.is_empty());
    let cfg = net.config().detect.clone();
    assert!(all.len() <= cfg.max_detections);
    for d in &all {
        assert_ne!(d.class_id, ClassId::Background);
        assert!(d.score >= cfg.score_threshold && d.score <= 1.0);
        assert!(d.bbox.x >= 0.0 && d.bbox.y >= 0.0 && d.bbox.right() <= 299.0 && d.bbox.bottom() <= 299.0);
    }
    for w in all.windows(2) {
        assert!(w[0].score >= w[1].score);
    }
    for (i, a) in all.iter().enumerate() {
        for b in &all[i + 1..] {
            if a.class_id == b.class_id {
                assert!(iou(&a.bbox, &b.bbox) <= cfg.nms_threshold);
            }
        }
    }
    let mut capped = net.config().detect.clone();
    capped.max_detections = 3;
    net.set_detect_config(capped);
    let few = net.detect(&img).unwrap();
    assert_eq!(few.len(), all.len().min(3));
    assert_eq!(few[..], all[..few.len()]);
}

#[test]
fn detection_is_deterministic() {
    let net = MitosNet::new(NetConfig::desk(), 8).unwrap();
    let img = image(9);
    assert_eq!(net.propose(&img).unwrap(), net.propose(&img).unwrap());
}

#[test]
fn loss_without_positives_has_no_regression() {
    let probs = vec![vec![0.7, 0.2, 0.1], vec![0.4, 0.5, 0.1]];
    let preds = vec![BoxDelta { tx: 3.0, ty: -1.0, tw: 0.5, th: 2.0 }; 2];
    let targets = vec![BoxDelta::default(); 2];
    let b = multitask_loss(&probs, &[0, 0], &preds, &targets, 2, 2, 10.0).unwrap();
    assert_eq!(b.reg_term, 0.0);
    assert_eq!(b.total, b.cls_term);
    let want = -(0.7f64.ln() + 0.4f64.ln()) / 2.0;
    assert!((b.cls_term - want).abs() < 1e-15);
}

#[test]
fn loss_is_cls_plus_lambda_reg() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100 {
        let rows = rng.random_range(1..20);
        let probs: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                let v: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.iter().map(|x| x / s).collect()
            })
            .collect();
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..3)).collect();
        let d = |rng: &mut ChaCha8Rng| BoxDelta {
            tx: rng.random_range(-2.0..2.0),
            ty: rng.random_range(-2.0..2.0),
            tw: rng.random_range(-2.0..2.0),
            th: rng.random_range(-2.0..2.0),
        };
        let preds: Vec<BoxDelta> = (0..rows).map(|_| d(&mut rng)).collect();
        let targets: Vec<BoxDelta> = (0..rows).map(|_| d(&mut rng)).collect();
        let n_pos = labels.iter().filter(|&&l| l != 0).count().max(1);
        let lambda = [10.0, 1.0, 0.0][rng.random_range(0..3)];
        let b = multitask_loss(&probs, &labels, &preds, &targets, rows, n_pos, lambda).unwrap();
        if labels.iter().all(|&l| l == 0) {
            assert_eq!(b.total, b.cls_term);
        } else {
            assert_eq!(b.total, b.cls_term + lambda * b.reg_term);
        }
        // independent evaluation of both terms
        let cls: f64 = -(0..rows).map(|r| probs[r][labels[r]].ln()).sum::<f64>() / rows as f64;
        let sl1 = |x: f64| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 };
        let reg: f64 = (0..rows)
            .filter(|&r| labels[r] != 0)
            .map(|r| preds[r].to_array().iter().zip(targets[r].to_array()).map(|(p, t)| sl1(p - t)).sum::<f64>())
            .sum::<f64>()
            / n_pos as f64;
        assert!((b.cls_term - cls).abs() < 1e-12 && (b.reg_term - reg).abs() < 1e-12);
    }
    assert_eq!(NetConfig::default().lambda, 10.0);
    // shape mismatches are reported
    assert!(multitask_loss(&[vec![1.0, 0.0, 0.0]], &[0, 1], &[BoxDelta::default()], &[BoxDelta::default()], 1, 1, 10.0).is_err());
}
