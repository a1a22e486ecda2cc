//! Analytic gradients against central finite differences, op by op and for
//! the summed three-site loss of a small network.

use mitos_rcnn::data::BoxAnnotation;
use mitos_rcnn::detection::{roi_pool_tape, ClassId, MitosNet, NetConfig, StepPlan};
use mitos_rcnn::proposal::BBox;
use mitos_rcnn::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const PROBES: usize = 20;

fn rel_err(a: f64, n: f64) -> f64 {
    let d = (a - n).abs();
    let m = a.abs().max(n.abs());
    // both effectively zero: compare absolutely
    if m < 1e-8 {
        d
    } else {
        d / m
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

type Build<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Var;

/// Reduces the op output to a scalar with fixed random weights so every
/// output element carries a distinct upstream gradient.
fn scalar_of(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let n = tape.value(out).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let m = tape.mul_const(out, w).unwrap();
    tape.sum(m)
}

fn eval(inputs: &[Tensor], build: Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let out = build(&mut tape, &vars);
    let s = scalar_of(&mut tape, out, 99);
    tape.value(s).item()
}

/// Checks `PROBES` random coordinates across the inputs and returns the
/// worst relative error.
fn check_op(name: &str, inputs: Vec<Tensor>, build: Build, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let out = build(&mut tape, &vars);
    let s = scalar_of(&mut tape, out, 99);
    let grads = tape.backward(s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..PROBES {
        let which = rng.random_range(0..inputs.len());
        let k = rng.random_range(0..inputs[which].numel());
        let analytic = grads.get(vars[which]).map_or(0.0, |g| g[k]);
        let mut plus = inputs.clone();
        plus[which].data_mut()[k] += STEP;
        let mut minus = inputs.clone();
        minus[which].data_mut()[k] -= STEP;
        let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * STEP);
        let e = rel_err(analytic, numeric);
        assert!(e <= TOL, "{}: input {} index {}: analytic {} numeric {}", name, which, k, analytic, numeric);
        worst = worst.max(e);
    }
    worst
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (stride, pad, c, k) in [(1, 1, 3, 3), (2, 0, 2, 3), (1, 0, 9, 3), (1, 1, 10, 1)] {
        let inputs = vec![random(&[c, 7, 6], &mut rng), random(&[4, c, k, k], &mut rng), random(&[4], &mut rng)];
        check_op(
            "conv2d",
            inputs,
            &move |t: &mut Tape, v: &[Var]| t.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap(),
            stride as u64,
        );
    }
}

#[test]
fn deconv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![random(&[3, 4, 5], &mut rng), random(&[3, 2, 2, 2], &mut rng)];
    check_op("deconv2d", inputs, &|t: &mut Tape, v: &[Var]| t.deconv2d(v[0], v[1], 2).unwrap(), 2);
}

#[test]
fn maxpool_relu_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check_op(
        "maxpool2d",
        vec![random(&[2, 6, 7], &mut rng)],
        &|t: &mut Tape, v: &[Var]| t.maxpool2d(v[0], 2, 2).unwrap(),
        3,
    );
    check_op("relu", vec![random(&[40], &mut rng)], &|t: &mut Tape, v: &[Var]| t.relu(v[0]), 4);
}

#[test]
fn fully_connected_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![random(&[3, 6], &mut rng), random(&[5, 6], &mut rng), random(&[5], &mut rng)];
    check_op(
        "fully_connected",
        inputs,
        &|t: &mut Tape, v: &[Var]| t.fully_connected(v[0], v[1], v[2]).unwrap(),
        5,
    );
}

#[test]
fn softmax_family_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check_op("softmax", vec![random(&[4, 3], &mut rng)], &|t: &mut Tape, v: &[Var]| t.softmax(v[0]).unwrap(), 6);
    check_op(
        "grouped_channel_softmax",
        vec![random(&[6, 3, 2], &mut rng)],
        &|t: &mut Tape, v: &[Var]| t.grouped_channel_softmax(v[0], 2).unwrap(),
        7,
    );
    // probabilities kept away from zero so the logarithm stays smooth
    let probs = Tensor::new(vec![3, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3, 0.25, 0.25, 0.5]).unwrap();
    check_op(
        "cross_entropy",
        vec![probs],
        &|t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &[1, 0, 2]).unwrap(),
        8,
    );
}

#[test]
fn normalize_concat_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let scale = Tensor::new(vec![4], vec![10.0, 9.0, 11.0, 10.5]).unwrap();
    check_op(
        "l2_normalize_channels",
        vec![random(&[4, 3, 3], &mut rng), scale],
        &|t: &mut Tape, v: &[Var]| t.l2_normalize_channels(v[0], v[1]).unwrap(),
        9,
    );
    check_op(
        "concat_channels",
        vec![random(&[2, 3, 3], &mut rng), random(&[3, 3, 3], &mut rng)],
        &|t: &mut Tape, v: &[Var]| t.concat_channels(v[0], v[1]).unwrap(),
        10,
    );
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // smooth-L1 probed on both sides of the |x| = 1 switch
    let x = Tensor::new(vec![30], (0..30).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
    check_op("smooth_l1", vec![x], &|t: &mut Tape, v: &[Var]| t.smooth_l1(v[0]), 11);
    let (a, b) = (random(&[12], &mut rng), random(&[12], &mut rng));
    check_op("add", vec![a.clone(), b.clone()], &|t: &mut Tape, v: &[Var]| t.add(v[0], v[1]).unwrap(), 12);
    check_op("sub", vec![a.clone(), b], &|t: &mut Tape, v: &[Var]| t.sub(v[0], v[1]).unwrap(), 13);
    check_op("scale", vec![a.clone()], &|t: &mut Tape, v: &[Var]| t.scale(v[0], -2.5), 14);
    check_op("sum", vec![a.clone()], &|t: &mut Tape, v: &[Var]| t.sum(v[0]), 15);
    check_op(
        "mul_const",
        vec![a.clone()],
        &|t: &mut Tape, v: &[Var]| t.mul_const(v[0], (0..12).map(|i| i as f64 - 4.0).collect()).unwrap(),
        16,
    );
    check_op("reshape", vec![a.clone()], &|t: &mut Tape, v: &[Var]| t.reshape(v[0], &[3, 4]).unwrap(), 17);
    check_op(
        "gather",
        vec![a],
        &|t: &mut Tape, v: &[Var]| t.gather(v[0], vec![3, 3, 0, 11, 5, 7], &[2, 3]).unwrap(),
        18,
    );
}

#[test]
fn roi_pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let boxes = [BBox::new(4.0, 8.0, 20.0, 16.0).unwrap(), BBox::new(0.0, 0.0, 40.0, 40.0).unwrap()];
    check_op(
        "roi_pool",
        vec![random(&[2, 10, 10], &mut rng)],
        &move |t: &mut Tape, v: &[Var]| roi_pool_tape(t, v[0], &boxes, 4.0, 3, 3).unwrap(),
        19,
    );
}

fn tiny_net() -> MitosNet {
    let mut cfg = NetConfig::desk();
    cfg.backbone.stage_channels = vec![2, 3, 4, 4];
    cfg.backbone.convs_per_stage = vec![1, 1, 1, 1];
    cfg.backbone.input_size = 64;
    cfg.proposal.head_channels = 4;
    cfg.proposal.batch_per_image = 16;
    cfg.head.hidden = 6;
    cfg.head.pool_size = 2;
    cfg.head.rois_per_image = 8;
    let mut net = MitosNet::new(cfg, 3).unwrap();
    // larger weights than the default keep gradients well above round-off
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    net.initialize(&mut rng, 0.2).unwrap();
    net
}

fn frozen_loss(net: &MitosNet, image: &Tensor, gts: &[BoxAnnotation], plan: &StepPlan) -> f64 {
    let mut tape = Tape::new();
    let p = net.store().bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (total, _, _) = net.forward_train(&mut tape, &p, image, gts, &mut rng, Some(plan)).unwrap();
    tape.value(total).item()
}

#[test]
fn full_loss_gradients() {
    let mut net = tiny_net();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let image = Tensor::new(vec![3, 64, 64], (0..3 * 64 * 64).map(|_| rng.random::<f64>()).collect()).unwrap();
    let gts = vec![
        BoxAnnotation::centered(BBox::new(10.0, 12.0, 24.0, 20.0).unwrap(), ClassId::MitoticFigure).unwrap(),
        BoxAnnotation::centered(BBox::new(36.0, 30.0, 18.0, 22.0).unwrap(), ClassId::NotMitoticFigure).unwrap(),
    ];
    let mut tape = Tape::new();
    let p = net.store().bind(&mut tape);
    let (total, loss, plan) = net.forward_train(&mut tape, &p, &image, &gts, &mut rng, None).unwrap();
    assert!(loss.head.n_reg > 0 && loss.rpn1.n_cls > 0 && loss.rpn2.n_cls > 0, "{:?}", loss);
    let grads = tape.backward(total).unwrap();
    let ids: Vec<_> = net.store().ids().collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| grads.get(p.var(id)).map_or(vec![0.0; net.store().get(id).numel()], |g| g.to_vec()))
        .collect();

    // probe every parameter group, preferring coordinates with signal
    let mut probes = Vec::new();
    for (i, g) in analytic.iter().enumerate() {
        if let Some(k) = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())) {
            probes.push((i, k));
        }
        let k = rng.random_range(0..g.len());
        probes.push((i, k));
    }
    assert!(probes.len() >= PROBES);
    let mut nonzero = 0;
    for (i, k) in probes {
        let id = ids[i];
        let orig = net.store().get(id).data()[k];
        net.store_mut().get_mut(id).data_mut()[k] = orig + STEP;
        let up = frozen_loss(&net, &image, &gts, &plan);
        net.store_mut().get_mut(id).data_mut()[k] = orig - STEP;
        let down = frozen_loss(&net, &image, &gts, &plan);
        net.store_mut().get_mut(id).data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic[i][k];
        if a.abs() > 1e-6 {
            nonzero += 1;
        }
        let e = rel_err(a, numeric);
        assert!(e <= TOL, "{}[{}]: analytic {} numeric {} rel {}", net.store().name(id), k, a, numeric, e);
    }
    assert!(nonzero >= PROBES, "only {} informative probes", nonzero);
}
