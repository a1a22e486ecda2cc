//! Metric arithmetic, centroid matching and dataset-level aggregation.

use indexmap::IndexMap;
use mitos_rcnn::data::{BoxAnnotation, DatasetManifest, ImageRecord, Provenance};
use mitos_rcnn::detection::{ClassId, Detection};
use mitos_rcnn::eval::{
    centroid_match, evaluate_manifest, metrics, parse_counts, proliferation_grade, radius_px, write_report, ConfusionCounts,
    Grade, MatchCriterion,
};
use mitos_rcnn::proposal::BBox;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn counts(tp: usize, fp: usize, fn_: usize) -> ConfusionCounts {
    ConfusionCounts { tp, fp, fn_ }
}

fn det_at(cx: f64, cy: f64, score: f64, class_id: ClassId) -> Detection {
    Detection {
        bbox: BBox::new(cx - 10.0, cy - 10.0, 20.0, 20.0).unwrap(),
        class_id,
        score,
    }
}

fn gt_at(cx: f64, cy: f64, class_id: ClassId) -> BoxAnnotation {
    BoxAnnotation::centered(BBox::new(cx - 10.0, cy - 10.0, 20.0, 20.0).unwrap(), class_id).unwrap()
}

/// `2TP / (2TP + FP + FN)`, the closed form of the harmonic mean.
fn f1_oracle(c: ConfusionCounts) -> f64 {
    let d = 2 * c.tp + c.fp + c.fn_;
    if d == 0 {
        0.0
    } else {
        2.0 * c.tp as f64 / d as f64
    }
}

#[test]
fn reference_confusion_matrices() {
    for (c, want) in [(counts(96, 5, 4), 0.955), (counts(53, 58, 47), 0.502), (counts(72, 31, 28), 0.709)] {
        let m = metrics(c);
        assert!((m.f1 - want).abs() <= 0.0005, "{:?}: {}", c, m.f1);
        assert!((m.f1 - f1_oracle(c)).abs() < 1e-15);
    }
    let m = metrics(counts(96, 5, 4));
    assert!((m.precision - 96.0 / 101.0).abs() < 1e-15 && (m.recall - 0.96).abs() < 1e-15);
}

proptest! {
    #[test]
    fn f1_matches_closed_form(tp in 0usize..500, fp in 0usize..500, fn_ in 0usize..500) {
        let c = counts(tp, fp, fn_);
        let m = metrics(c);
        prop_assert!((m.f1 - f1_oracle(c)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&m.f1));
        prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-15 && m.f1 >= m.precision.min(m.recall) - 1e-15);
    }

    #[test]
    fn matching_is_one_to_one(seed in 0u64..5000, nd in 0usize..25, ng in 0usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let class = |rng: &mut ChaCha8Rng| if rng.random_bool(0.8) { ClassId::MitoticFigure } else { ClassId::NotMitoticFigure };
        let dets: Vec<Detection> = (0..nd)
            .map(|_| det_at(rng.random_range(10.0..110.0), rng.random_range(10.0..110.0), rng.random(), class(&mut rng)))
            .collect();
        let gts: Vec<BoxAnnotation> = (0..ng)
            .map(|_| gt_at(rng.random_range(10.0..110.0), rng.random_range(10.0..110.0), class(&mut rng)))
            .collect();
        let crit = MatchCriterion::new(0.2455).unwrap();
        let r = centroid_match(&dets, &gts, &crit);
        let md = dets.iter().filter(|d| d.class_id == ClassId::MitoticFigure).count();
        let mg = gts.iter().filter(|g| g.class_id == ClassId::MitoticFigure).count();
        prop_assert_eq!(r.counts.tp + r.counts.fp, md);
        prop_assert_eq!(r.counts.tp + r.counts.fn_, mg);
        prop_assert_eq!(r.pairings.len(), r.counts.tp);
        let mut seen_d = std::collections::HashSet::new();
        let mut seen_g = std::collections::HashSet::new();
        for p in &r.pairings {
            prop_assert!(seen_d.insert(p.detection) && seen_g.insert(p.gt));
            prop_assert_eq!(dets[p.detection].class_id, ClassId::MitoticFigure);
            prop_assert_eq!(gts[p.gt].class_id, ClassId::MitoticFigure);
            prop_assert!(p.distance_px <= crit.radius_px());
        }
        // an unmatched mitosis detection has no free centroid within reach
        let claimed: Vec<usize> = r.pairings.iter().map(|p| p.gt).collect();
        for (i, d) in dets.iter().enumerate() {
            if d.class_id == ClassId::MitoticFigure && !r.pairings.iter().any(|p| p.detection == i) {
                let (cx, cy) = d.centroid();
                for (g, gt) in gts.iter().enumerate() {
                    if gt.class_id == ClassId::MitoticFigure && !claimed.contains(&g) {
                        prop_assert!((cx - gt.centroid.0).hypot(cy - gt.centroid.1) > crit.radius_px());
                    }
                }
            }
        }
    }

    #[test]
    fn matching_ignores_input_order(seed in 0u64..5000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dets: Vec<Detection> = (0..15)
            .map(|i| det_at(rng.random_range(10.0..90.0), rng.random_range(10.0..90.0), 0.5 + i as f64 * 0.01, ClassId::MitoticFigure))
            .collect();
        let mut gts: Vec<BoxAnnotation> = (0..10)
            .map(|_| gt_at(rng.random_range(10.0..90.0), rng.random_range(10.0..90.0), ClassId::MitoticFigure))
            .collect();
        let crit = MatchCriterion::new(0.2455).unwrap();
        let before = centroid_match(&dets, &gts, &crit).counts;
        dets.shuffle(&mut rng);
        gts.shuffle(&mut rng);
        prop_assert_eq!(centroid_match(&dets, &gts, &crit).counts, before);
    }
}

#[test]
fn radius_follows_resolution() {
    assert!((radius_px(0.2455).unwrap() - 32.586558).abs() < 1e-5);
    assert!((radius_px(0.2273).unwrap() - 35.195776).abs() < 1e-5);
    assert!(radius_px(0.0).is_err());
    let crit = MatchCriterion::new(0.25).unwrap();
    assert_eq!(crit.radius_px(), 32.0);
    let gts = [gt_at(100.0, 100.0, ClassId::MitoticFigure)];
    assert_eq!(centroid_match(&[det_at(132.0, 100.0, 0.9, ClassId::MitoticFigure)], &gts, &crit).counts, counts(1, 0, 0));
    assert_eq!(centroid_match(&[det_at(132.01, 100.0, 0.9, ClassId::MitoticFigure)], &gts, &crit).counts, counts(0, 1, 1));
}

#[test]
fn higher_score_claims_first() {
    let crit = MatchCriterion::new(0.25).unwrap();
    let gts = [gt_at(100.0, 100.0, ClassId::MitoticFigure)];
    let dets = [det_at(101.0, 100.0, 0.6, ClassId::MitoticFigure), det_at(120.0, 100.0, 0.9, ClassId::MitoticFigure)];
    let r = centroid_match(&dets, &gts, &crit);
    assert_eq!(r.counts, counts(1, 1, 0));
    assert_eq!(r.pairings[0].detection, 1);
}

fn record(name: &str, res: f64, anns: Vec<BoxAnnotation>) -> ImageRecord {
    ImageRecord {
        image: name.into(),
        width: 299,
        height: 299,
        resolution_um_per_px: res,
        scanner: "s".into(),
        provenance: Provenance::default(),
        annotations: anns,
    }
}

#[test]
fn dataset_metrics_are_micro_averaged() {
    let m = ClassId::MitoticFigure;
    let manifest = DatasetManifest {
        records: vec![
            record("a", 0.2455, vec![gt_at(50.0, 50.0, m), gt_at(150.0, 150.0, m)]),
            record("b", 0.2273, vec![gt_at(60.0, 60.0, m)]),
            record("c", 0.2455, vec![]),
        ],
    };
    let mut dets = IndexMap::new();
    dets.insert("a".to_string(), vec![det_at(52.0, 50.0, 0.9, m), det_at(250.0, 250.0, 0.8, m)]);
    // 34 px away: inside the 35.2 px radius at 0.2273, outside 32.6 at 0.2455
    dets.insert("b".to_string(), vec![det_at(94.0, 60.0, 0.7, m)]);
    dets.insert("c".to_string(), vec![det_at(10.0, 10.0, 0.99, m), det_at(20.0, 20.0, 0.6, ClassId::NotMitoticFigure)]);
    let report = evaluate_manifest(&dets, &manifest).unwrap();
    let per: Vec<ConfusionCounts> = report.images.iter().map(|i| i.counts).collect();
    assert_eq!(per, [counts(1, 1, 1), counts(1, 0, 0), counts(0, 1, 0)]);
    assert_eq!(report.counts, counts(2, 2, 1));
    assert!((report.f1 - f1_oracle(counts(2, 2, 1))).abs() < 1e-15);
    let macro_f1 = per.iter().map(|&c| f1_oracle(c)).sum::<f64>() / 3.0;
    assert!((report.f1 - macro_f1).abs() > 0.05);
    assert_eq!(report.images[2].lookalike_detections, 1);

    let mut wrong = dets.clone();
    wrong.insert("zz".to_string(), vec![]);
    assert!(evaluate_manifest(&wrong, &manifest).is_err());
    // images without detections count their annotations as misses
    let partial: IndexMap<String, Vec<Detection>> = IndexMap::new();
    assert_eq!(evaluate_manifest(&partial, &manifest).unwrap().counts, counts(0, 0, 3));
}

#[test]
fn grades_and_report() {
    assert_eq!(proliferation_grade(0).unwrap(), Grade::Low);
    assert_eq!(proliferation_grade(9).unwrap(), Grade::Low);
    assert_eq!(proliferation_grade(10).unwrap(), Grade::Moderate);
    assert_eq!(proliferation_grade(19).unwrap(), Grade::Moderate);
    assert_eq!(proliferation_grade(20).unwrap(), Grade::Severe);
    assert!(proliferation_grade(-1).is_err());
    assert_eq!(parse_counts("96,5,4").unwrap(), counts(96, 5, 4));
    assert_eq!(parse_counts("# header\ntp=53\nfp=58\nfn=47\n").unwrap(), counts(53, 58, 47));
    assert!(parse_counts("1,2").is_err());
    let text = write_report(&metrics(counts(72, 31, 28)));
    assert!(text.contains("f1=0.709360"), "{}", text);
    assert_eq!(metrics(counts(0, 0, 0)).f1, 0.0);
}
