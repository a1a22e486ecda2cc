//! Tiling, resizing, rotation, stain transfer, synthetic frames and the manifest.

use mitos_rcnn::data::{
    resize_to_input, rotate_augment, stain_normalize, stain_stats, synth_generate, tile_bounds, tile_frame, BoxAnnotation,
    DatasetManifest, HpfFrame, ImageRecord, Provenance, StainStats, SynthConfig,
};
use mitos_rcnn::detection::ClassId;
use mitos_rcnn::proposal::BBox;
use mitos_rcnn::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn ann(x: f64, y: f64, w: f64, h: f64, class_id: ClassId) -> BoxAnnotation {
    BoxAnnotation::centered(BBox::new(x, y, w, h).unwrap(), class_id).unwrap()
}

#[test]
fn tile_widths_for_1539() {
    let b = tile_bounds(1539);
    let widths: Vec<usize> = b.windows(2).map(|p| p[1] - p[0]).collect();
    assert_eq!(widths, [384, 385, 385, 385]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tiles_partition_the_frame(h in 4usize..40, w in 4usize..40, seed in 0u64..1000) {
        let img = random_image(h, w, 0.0, 1.0, seed);
        let frame = HpfFrame::new(img.clone(), 0.25, "x").unwrap();
        let tiles = tile_frame(&frame, &[]).unwrap();
        prop_assert_eq!(tiles.len(), 16);
        let mut cover = vec![0u8; h * w];
        for t in &tiles {
            let (th, tw) = (t.pixels.shape()[1], t.pixels.shape()[2]);
            prop_assert!(th > 0 && tw > 0);
            for y in 0..th {
                for x in 0..tw {
                    let (fx, fy) = (t.origin.0 + x, t.origin.1 + y);
                    cover[fy * w + fx] += 1;
                    for c in 0..3 {
                        prop_assert_eq!(t.pixels.at3(c, y, x), img.at3(c, fy, fx));
                    }
                }
            }
        }
        prop_assert!(cover.iter().all(|&c| c == 1));
    }

    #[test]
    fn rotations_cycle_and_permute_pixels(n in 2usize..24, seed in 0u64..1000) {
        let img = random_image(n, n, 0.0, 1.0, seed);
        let nf = n as f64;
        let a = ann(0.0, 0.0, nf / 2.0, nf / 3.0, ClassId::MitoticFigure);
        let (r90, a90) = rotate_augment(&img, &[a], 90).unwrap();
        let (r180, a180) = rotate_augment(&img, &[a], 180).unwrap();
        let (r270, _) = rotate_augment(&img, &[a], 270).unwrap();
        // four quarter turns and two half turns are the identity
        let (back, ab) = rotate_augment(&r270, &[rotate_augment(&img, &[a], 270).unwrap().1[0]], 90).unwrap();
        prop_assert_eq!(back.data(), img.data());
        prop_assert!((ab[0].bbox.x - a.bbox.x).abs() < 1e-9 && (ab[0].bbox.w - a.bbox.w).abs() < 1e-9);
        let (twice, a360) = rotate_augment(&r180, &a180, 180).unwrap();
        prop_assert_eq!(twice.data(), img.data());
        prop_assert!((a360[0].bbox.x - a.bbox.x).abs() < 1e-9 && (a360[0].bbox.y - a.bbox.y).abs() < 1e-9);
        let (r90x2, _) = rotate_augment(&r90, &a90, 90).unwrap();
        prop_assert_eq!(r90x2.data(), r180.data());
        // pixel multiset preserved
        let mut s0: Vec<f64> = img.data().to_vec();
        let mut s1: Vec<f64> = r90.data().to_vec();
        s0.sort_by(f64::total_cmp);
        s1.sort_by(f64::total_cmp);
        prop_assert_eq!(s0, s1);
        // (x, y, w, h) -> (N - y - h, x, h, w)
        let b = a90[0].bbox;
        prop_assert!((b.x - (nf - a.bbox.y - a.bbox.h)).abs() < 1e-12);
        prop_assert_eq!((b.y, b.w, b.h), (a.bbox.x, a.bbox.h, a.bbox.w));
    }
}

#[test]
fn rotation_rejects_other_angles_and_non_square() {
    let sq = random_image(8, 8, 0.0, 1.0, 1);
    for angle in [0, 45, 360] {
        assert!(rotate_augment(&sq, &[], angle).is_err());
    }
    assert!(rotate_augment(&random_image(8, 9, 0.0, 1.0, 1), &[], 90).is_err());
}

#[test]
fn tiling_assigns_annotations_by_centroid() {
    let frame = HpfFrame::new(random_image(100, 100, 0.0, 1.0, 2), 0.25, "x").unwrap();
    let inside = ann(30.0, 30.0, 10.0, 10.0, ClassId::MitoticFigure);
    // centroid (51, 51) lands in tile 2,2; most of the box stays there
    let straddle = ann(46.0, 46.0, 10.0, 10.0, ClassId::NotMitoticFigure);
    let tiles = tile_frame(&frame, &[inside, straddle]).unwrap();
    assert_eq!(tiles[5].annotations.len(), 1);
    assert_eq!(tiles[5].annotations[0].bbox, BBox::new(5.0, 5.0, 10.0, 10.0).unwrap());
    let t10 = &tiles[10].annotations;
    assert_eq!(t10.len(), 1);
    assert_eq!(t10[0].bbox, BBox::new(0.0, 0.0, 6.0, 6.0).unwrap());
    assert_eq!(tiles.iter().map(|t| t.annotations.len()).sum::<usize>(), 2);
}

#[test]
fn resize_scales_boxes() {
    let img = random_image(64, 128, 0.0, 1.0, 3);
    let a = ann(32.0, 16.0, 16.0, 8.0, ClassId::MitoticFigure);
    let (out, anns, (sx, sy)) = resize_to_input(&img, &[a], 299).unwrap();
    assert_eq!(out.shape(), &[3, 299, 299]);
    assert_eq!((sx, sy), (299.0 / 128.0, 299.0 / 64.0));
    let b = anns[0].bbox;
    assert!((b.x - 32.0 * sx).abs() < 1e-12 && (b.h - 8.0 * sy).abs() < 1e-12);
    let same = random_image(299, 299, 0.0, 1.0, 4);
    assert_eq!(resize_to_input(&same, &[], 299).unwrap().0, same);
    // constant images stay constant
    let flat = Tensor::full(&[3, 17, 23], 0.4);
    assert!(resize_to_input(&flat, &[], 50).unwrap().0.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
}

#[test]
fn stain_transfer_is_a_fixed_point_on_own_statistics() {
    for seed in 0..5 {
        let img = random_image(32, 32, 0.2, 0.8, seed);
        let own = stain_stats(&img).unwrap();
        let out = stain_normalize(&img, &own).unwrap();
        let worst = out.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-6, "seed {}: {}", seed, worst);
    }
}

#[test]
fn stain_transfer_is_idempotent_and_hits_target() {
    let img = random_image(32, 32, 0.3, 0.7, 10);
    let base = stain_stats(&random_image(32, 32, 0.35, 0.65, 11)).unwrap();
    // a mild shift keeps every pixel away from the clamp
    let target = StainStats {
        mean: [base.mean[0] + 0.02, base.mean[1] - 0.005, base.mean[2] + 0.003],
        std: base.std,
    };
    let once = stain_normalize(&img, &target).unwrap();
    let twice = stain_normalize(&once, &target).unwrap();
    let worst = once.data().iter().zip(twice.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-6, "{}", worst);
    let got = stain_stats(&once).unwrap();
    for k in 0..3 {
        assert!((got.mean[k] - target.mean[k]).abs() < 1e-6 && (got.std[k] - target.std[k]).abs() < 1e-6);
    }
    assert!(once.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn stain_transfer_of_constant_image_is_finite() {
    let out = stain_normalize(&Tensor::full(&[3, 4, 4], 0.5), &stain_stats(&random_image(8, 8, 0.2, 0.8, 1)).unwrap()).unwrap();
    assert!(out.data().iter().all(|v| v.is_finite()));
}

#[test]
fn synthetic_objects_respect_size_range() {
    let cfg = SynthConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut objects = 0;
    let mut frames = 0;
    while objects < 1000 {
        let f = synth_generate(&cfg, &mut rng).unwrap();
        frames += 1;
        let mitoses = f.annotations.iter().filter(|a| a.class_id == ClassId::MitoticFigure).count();
        let looks = f.annotations.len() - mitoses;
        if !f.budget_exhausted {
            assert!((cfg.mitoses[0]..=cfg.mitoses[1]).contains(&mitoses));
            assert!((cfg.lookalikes[0]..=cfg.lookalikes[1]).contains(&looks));
        }
        for a in &f.annotations {
            for side in [a.bbox.w, a.bbox.h] {
                assert!(side >= cfg.object_size_px[0] && side <= cfg.object_size_px[1], "side {}", side);
            }
            assert!(a.within(299.0, 299.0));
            assert!(a.bbox.contains_point(a.centroid.0, a.centroid.1));
        }
        assert_eq!(f.frame.pixels.shape(), &[3, 299, 299]);
        assert_eq!(f.frame.resolution_um_per_px, 0.2455);
        objects += f.annotations.len();
    }
    assert!(frames < 1000);
}

#[test]
fn synthetic_frames_are_seed_deterministic() {
    let cfg = SynthConfig::default();
    let a = synth_generate(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = synth_generate(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a.frame, b.frame);
    assert_eq!(a.annotations, b.annotations);
    let zero = SynthConfig {
        mitoses: [0, 0],
        lookalikes: [0, 0],
        ..Default::default()
    };
    assert!(synth_generate(&zero, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().annotations.is_empty());
    let bad = SynthConfig {
        object_size_px: [40.0, 20.0],
        ..Default::default()
    };
    assert!(synth_generate(&bad, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
}

#[test]
fn manifest_round_trip() {
    let rec = |name: &str, rot: u32| ImageRecord {
        image: format!("images/{}.png", name),
        width: 299,
        height: 299,
        resolution_um_per_px: 0.2273,
        scanner: "hamamatsu".into(),
        provenance: Provenance {
            rotation_deg: rot,
            stain_normalized: true,
            source_tile: Some(7),
            scale_x: 0.7786458333333334,
            scale_y: 0.7806788511749347,
            source: format!("raw/{}.tiff", name),
            notes: "batch a".into(),
        },
        annotations: vec![
            ann(10.5, 20.25, 16.0, 18.0, ClassId::MitoticFigure),
            BoxAnnotation::new(BBox::new(100.0, 50.0, 22.0, 30.0).unwrap(), ClassId::NotMitoticFigure, (104.125, 61.0)).unwrap(),
        ],
    };
    let m = DatasetManifest {
        records: vec![rec("a", 0), rec("b", 90), ImageRecord { annotations: vec![], ..rec("c", 270) }],
    };
    let text = m.to_text().unwrap();
    let back = DatasetManifest::parse(&text, "mem").unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_text().unwrap(), text);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    m.save(&path).unwrap();
    assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    assert!(DatasetManifest::parse("garbage", "mem").is_err());
}
