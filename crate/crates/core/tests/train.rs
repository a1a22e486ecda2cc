//! Optimizer arithmetic, initialization, schedule handling and the training
//! loop's convergence, determinism and resumability.

use mitos_rcnn::data::{synth_generate, SynthConfig};
use mitos_rcnn::detection::{MitosNet, NetConfig};
use mitos_rcnn::optim::{he_init, init_weights, train, Phase, Sgd, TrainConfig, TrainImage, TrainState, LOSS_LOG_HEADER};
use mitos_rcnn::params::{ParamKind, ParamStore};
use mitos_rcnn::tensor::Checkpoint;
use mitos_rcnn::MitosError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 128;

fn small_net() -> NetConfig {
    let mut cfg = NetConfig::desk();
    cfg.backbone.input_size = SIZE;
    cfg
}

fn small_set(n: usize, seed: u64) -> Vec<TrainImage> {
    let synth = SynthConfig {
        size: SIZE,
        mitoses: [1, 2],
        lookalikes: [0, 1],
        clutter: [1, 3],
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let f = synth_generate(&synth, &mut rng).unwrap();
            TrainImage::new(format!("f{}", i), &f.frame.pixels, f.annotations).unwrap()
        })
        .collect()
}

fn schedule(iterations: usize, lr: f64, batch: usize) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        phases: vec![Phase {
            iterations,
            learning_rate: lr,
        }],
        ..TrainConfig::desk()
    }
}

fn run(cfg: &TrainConfig, data: &[TrainImage]) -> (TrainState, String) {
    let mut state = TrainState::fresh(small_net(), cfg).unwrap();
    let mut log = Vec::new();
    train(&mut state, data, cfg, &mut log, None).unwrap();
    (state, String::from_utf8(log).unwrap())
}

#[test]
fn sgd_step_matches_hand_computation() {
    let mut s = ParamStore::new();
    let id = s.register("p", &[2], ParamKind::Weight { fan_in: 2 }).unwrap();
    s.get_mut(id).data_mut().copy_from_slice(&[1.0, 2.0]);
    let mut sgd = Sgd::new(&s, 0.9, 0.1);
    let g = [0.5, -1.0];
    let (mut p, mut v) = ([1.0f64, 2.0], [0.0f64; 2]);
    for _ in 0..3 {
        s.get_mut(id).set_grad(g.to_vec()).unwrap();
        sgd.step(&mut s, 0.1).unwrap();
        for k in 0..2 {
            v[k] = 0.9 * v[k] + g[k] + 0.1 * p[k];
            p[k] -= 0.1 * v[k];
        }
        assert_eq!(s.get(id).data(), &p);
    }
    s.get_mut(id).clear_grad();
    assert!(sgd.step(&mut s, 0.1).is_err());
}

#[test]
fn initializers_have_requested_spread() {
    let mut s = ParamStore::new();
    let w = s.register("w", &[200_000], ParamKind::Weight { fan_in: 50 }).unwrap();
    let b = s.register("b", &[4], ParamKind::Bias).unwrap();
    let std = |s: &ParamStore| {
        let d = s.get(w).data();
        (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    init_weights(&mut s, [w, b], 0.01, &mut rng).unwrap();
    assert!((std(&s) - 0.01).abs() < 1e-4);
    he_init(&mut s, [w, b], &mut rng).unwrap();
    assert!((std(&s) - (2.0f64 / 50.0).sqrt()).abs() < 2e-3);
    assert!(s.get(b).data().iter().all(|&v| v == 0.0));
}

#[test]
fn long_schedule_is_accepted() {
    let cfg = TrainConfig::default();
    cfg.validate().unwrap();
    assert_eq!(cfg.batch_size, 10);
    assert_eq!((cfg.momentum, cfg.weight_decay, cfg.init_sigma), (0.9, 0.0005, 0.01));
    assert_eq!(cfg.total_iterations(), 80_000);
    assert_eq!(cfg.schedule(0), Some((0, 1e-3)));
    assert_eq!(cfg.schedule(59_999), Some((0, 1e-3)));
    assert_eq!(cfg.schedule(60_000), Some((1, 1e-4)));
    assert_eq!(cfg.schedule(80_000), None);
    let desk = TrainConfig::desk();
    assert!(desk.total_iterations() <= 2000);
    for bad in [
        TrainConfig { phases: vec![], ..TrainConfig::desk() },
        TrainConfig { batch_size: 0, ..TrainConfig::desk() },
        TrainConfig { momentum: 1.0, ..TrainConfig::desk() },
        TrainConfig { init_sigma: 0.0, ..TrainConfig::desk() },
        schedule(10, -1.0, 1),
    ] {
        assert!(bad.validate().is_err(), "{:?}", bad);
    }
}

#[test]
fn loss_decreases_over_200_iterations() {
    let data = small_set(20, 3);
    let (_, log) = run(&schedule(200, 3e-3, 1), &data);
    let totals: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(totals.len(), 200);
    let first: f64 = totals[..20].iter().sum::<f64>() / 20.0;
    let last: f64 = totals[180..].iter().sum::<f64>() / 20.0;
    assert!(last < first, "first {} last {}", first, last);
}

#[test]
fn identical_seeds_give_identical_histories() {
    let data = small_set(5, 4);
    let cfg = schedule(6, 3e-3, 2);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let (sa, la) = one.install(|| run(&cfg, &data));
    let (sb, lb) = three.install(|| run(&cfg, &data));
    assert_eq!(la, lb);
    assert!(la.starts_with(LOSS_LOG_HEADER));
    assert_eq!(la.lines().count(), 7);
    assert_eq!(sa.to_checkpoint(&cfg).to_bytes(), sb.to_checkpoint(&cfg).to_bytes());
    let other = TrainConfig { seed: 1, ..cfg.clone() };
    assert_ne!(run(&other, &data).1, la);
}

#[test]
fn resuming_reproduces_an_uninterrupted_run() {
    let data = small_set(4, 5);
    let cfg = TrainConfig {
        checkpoint_interval: 3,
        phases: vec![
            Phase {
                iterations: 4,
                learning_rate: 3e-3,
            },
            Phase {
                iterations: 2,
                learning_rate: 3e-4,
            },
        ],
        ..schedule(1, 1.0, 2)
    };
    let dir = tempfile::tempdir().unwrap();
    let mut full = TrainState::fresh(small_net(), &cfg).unwrap();
    let mut log = Vec::new();
    let out = train(&mut full, &data, &cfg, &mut log, Some(dir.path())).unwrap();
    let names: Vec<String> = out
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["checkpoint_000003.ckpt", "checkpoint_000004.ckpt", "checkpoint_000006.ckpt"]);

    let ckpt = Checkpoint::load(&out.checkpoints[0]).unwrap();
    assert_eq!(ckpt.meta_value("iteration"), Some("3"));
    let mut resumed = TrainState::from_checkpoint(&ckpt, &cfg).unwrap();
    assert_eq!(resumed.iteration, 3);
    let mut tail = Vec::new();
    let rest = train(&mut resumed, &data, &cfg, &mut tail, None).unwrap();
    assert_eq!(rest.history[..], out.history[3..]);
    let full_log = String::from_utf8(log).unwrap();
    let tail_log = String::from_utf8(tail).unwrap();
    assert!(full_log.ends_with(&tail_log));
    assert!(!tail_log.contains(LOSS_LOG_HEADER));
    assert_eq!(resumed.to_checkpoint(&cfg).to_bytes(), full.to_checkpoint(&cfg).to_bytes());
    assert_eq!(std::fs::read(&out.checkpoints[2]).unwrap(), full.to_checkpoint(&cfg).to_bytes());
}

#[test]
fn non_finite_loss_stops_training() {
    let data = small_set(2, 6);
    let cfg = schedule(3, 3e-3, 1);
    let mut state = TrainState::fresh(small_net(), &cfg).unwrap();
    let id = state.net.store().id("head/cls/bias").unwrap();
    state.net.store_mut().get_mut(id).data_mut()[0] = f64::NAN;
    let err = train(&mut state, &data, &cfg, &mut Vec::new(), None).unwrap_err();
    assert!(matches!(err, MitosError::NonFiniteLoss { iteration: 1 }), "{}", err);
    assert!(err.is_numeric());
}

#[test]
fn fresh_state_is_seeded() {
    let cfg = schedule(1, 1e-3, 1);
    let a = TrainState::fresh(small_net(), &cfg).unwrap();
    let b = TrainState::fresh(small_net(), &cfg).unwrap();
    assert_eq!(a.net.to_checkpoint(vec![]).to_bytes(), b.net.to_checkpoint(vec![]).to_bytes());
    let round = MitosNet::from_checkpoint(&a.net.to_checkpoint(vec![])).unwrap();
    assert_eq!(round.config(), a.net.config());
}
