//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every op appends a node holding its output value and enough context for
//! its backward rule. [`Tape::backward`] replays the record in reverse and
//! consumes the tape; a second call is rejected.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeom};
use super::ops;
use super::Tensor;
use crate::error::{MitosError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for ops defined outside this module.
pub trait CustomBackward {
    /// Gradient for each input given the upstream gradient of the output.
    /// Entries for inputs with `needs[i] == false` may be `None`.
    fn backward(&self, grad_out: &[f64], inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f64>>>;

    /// Discrete choices made in the forward pass (argmax indices and the like).
    fn selections(&self) -> &[usize] {
        &[]
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, g: ConvGeom, o: usize },
    Deconv2d { x: Var, w: Var, g: ConvGeom, cin: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Relu { x: Var },
    Linear { x: Var, w: Var, b: Var, rows: usize, n: usize, m: usize },
    Softmax { x: Var, n: usize },
    GroupSoftmax { x: Var, group: usize, hw: usize },
    L2Norm { x: Var, scale: Var, norms: Vec<f64> },
    Concat { a: Var, b: Var },
    CrossEntropy { probs: Var, targets: Vec<usize>, classes: usize },
    SmoothL1 { x: Var },
    Gather { x: Var, idx: Vec<usize> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Sum { x: Var },
    MulConst { x: Var, mask: Vec<f64> },
    Reshape { x: Var },
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Deconv2d { .. } => "deconv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Relu { .. } => "relu",
            Op::Linear { .. } => "fully_connected",
            Op::Softmax { .. } => "softmax",
            Op::GroupSoftmax { .. } => "grouped_channel_softmax",
            Op::L2Norm { .. } => "l2_normalize_channels",
            Op::Concat { .. } => "concat_channels",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::Gather { .. } => "gather",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::MulConst { .. } => "mul_const",
            Op::Reshape { .. } => "reshape",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`] for every leaf that requires them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: Vec<&'static str>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Names of the ops whose backward rule ran, in the order they ran.
    pub fn visit_order(&self) -> &[&'static str] {
        &self.visited
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Fingerprint of every piecewise branch taken so far: ReLU signs, pooling
    /// argmaxes, smooth-L1 regions and custom-op selections. Two tapes with the
    /// same fingerprint evaluated the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => self.nodes[x.0].value.data().iter().for_each(|&v| (v > 0.0).hash(&mut h)),
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                Op::SmoothL1 { x } => self.nodes[x.0].value.data().iter().for_each(|&v| v.abs().total_cmp(&1.0).hash(&mut h)),
                Op::Custom { rule, .. } => rule.selections().hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let t = Tensor { grad: None, ..t };
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (g, o) = ops::conv_geom(self.value(x), self.value(w), stride, pad)?;
        let out = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Conv2d { x, w, b, g, o }, rg))
    }

    pub fn deconv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (g, cin) = ops::deconv_geom(self.value(x), self.value(w), stride)?;
        let out = ops::deconv2d(self.value(x), self.value(w), stride)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::Deconv2d { x, w, g, cin }, rg))
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d_with_argmax(self.value(x), window, stride)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::fully_connected(self.value(x), self.value(w), self.value(b))?;
        let (rows, n, _) = ops::linear_dims(self.value(x))?;
        let m = self.value(w).shape()[0];
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Linear { x, w, b, rows, n, m }, rg))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax(self.value(x))?;
        let n = *out.shape().last().expect("non-empty");
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, n }, rg))
    }

    pub fn grouped_channel_softmax(&mut self, x: Var, group: usize) -> Result<Var> {
        let out = ops::grouped_channel_softmax(self.value(x), group)?;
        let hw = out.shape()[1] * out.shape()[2];
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GroupSoftmax { x, group, hw }, rg))
    }

    pub fn l2_normalize_channels(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (out, norms) = ops::l2_normalize_with_norms(self.value(x), self.value(scale))?;
        let rg = self.rg(&[x, scale]);
        Ok(self.push(out, Op::L2Norm { x, scale, norms }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    /// Per-row `-ln p[target]` for `probs: [C]` (one target) or `[R, C]`.
    /// The result has shape `[R]`.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let p = self.value(probs);
        let (rows, classes) = match p.shape() {
            &[c] => (1, c),
            &[r, c] => (r, c),
            other => return Err(MitosError::shape("cross_entropy", "[C] or [R, C]", format!("{:?}", other))),
        };
        if targets.len() != rows {
            return Err(MitosError::shape("cross_entropy", format!("{} targets", rows), targets.len()));
        }
        let mut out = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(MitosError::invalid(format!(
                    "cross_entropy: class {} out of range {}",
                    t, classes
                )));
            }
            out.push(ops::neg_log_prob(p.data()[r * classes + t]));
        }
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Tensor::vector(out),
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
                classes,
            },
            rg,
        ))
    }

    /// Elementwise smooth-L1.
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| ops::smooth_l1(a)).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::SmoothL1 { x }, rg)
    }

    /// Picks flat elements `idx` of `x` into a tensor of `shape`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(MitosError::invalid(format!("gather: index {} out of range {}", bad, src.len())));
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gather { x, idx }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(MitosError::shape(
                op,
                format!("{:?}", self.value(a).shape()),
                format!("{:?}", self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect()).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, c }, rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(MitosError::shape("mul_const", v.numel(), mask.len()));
        }
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().zip(&mask).map(|(a, m)| a * m).collect())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MulConst { x, mask }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    /// Records an op computed elsewhere together with its backward rule.
    pub fn custom(&mut self, inputs: Vec<Var>, output: Tensor, rule: Box<dyn CustomBackward>) -> Var {
        let rg = self.rg(&inputs);
        self.push(output, Op::Custom { inputs, rule }, rg)
    }

    /// Backpropagates from the scalar `loss`, consuming the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(MitosError::TapeConsumed);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(MitosError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut visited = Vec::new();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if grads[i].is_none() {
                    grads[i] = Some(vec![0.0; node.value.numel()]);
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(node.op.name());
            self.propagate(i, &g, &mut grads);
        }
        // leaves recorded after the loss never saw it
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let need = |v: &Var| self.nodes[v.0].requires_grad;
        let val = |v: &Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, g: geom, o } => {
                let cg = kernels::conv_backward(val(x).data(), val(w).data(), g, *o, geom, need(x));
                if let Some(dx) = cg.dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if need(w) {
                    accumulate(&mut grads[w.0], cg.dw);
                }
                if let Some(b) = b {
                    if need(b) {
                        accumulate(&mut grads[b.0], cg.db);
                    }
                }
            }
            Op::Deconv2d { x, w, g: geom, cin } => {
                let (dx, dw) = kernels::deconv_backward(val(x).data(), val(w).data(), g, *cin, geom, need(x));
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if need(w) {
                    accumulate(&mut grads[w.0], dw);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; val(x).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Relu { x } => {
                let dx = val(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], dx);
            }
            Op::Linear { x, w, b, rows, n, m } => {
                if need(x) {
                    let mut dx = vec![0.0; rows * n];
                    kernels::gemm(*rows, *m, *n, g, false, val(w).data(), false, &mut dx, 0.0);
                    accumulate(&mut grads[x.0], dx);
                }
                if need(w) {
                    let mut dw = vec![0.0; m * n];
                    kernels::gemm(*m, *rows, *n, g, true, val(x).data(), false, &mut dw, 0.0);
                    accumulate(&mut grads[w.0], dw);
                }
                if need(b) {
                    let mut db = vec![0.0; *m];
                    for row in g.chunks(*m) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Softmax { x, n } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(*n).zip(g.chunks(*n)).zip(dx.chunks_mut(*n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..*n {
                        dr[k] = yr[k] * (gr[k] - dot);
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::GroupSoftmax { x, group, hw } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                let anchors = y.len() / (group * hw);
                for a in 0..anchors {
                    for p in 0..*hw {
                        let idx = |k: usize| (a * group + k) * hw + p;
                        let dot: f64 = (0..*group).map(|k| y[idx(k)] * g[idx(k)]).sum();
                        for k in 0..*group {
                            dx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::L2Norm { x, scale, norms } => {
                let xv = val(x).data();
                let s = val(scale).data();
                let hw = norms.len();
                let c = s.len();
                if need(scale) {
                    let mut ds = vec![0.0; c];
                    for (ci, d) in ds.iter_mut().enumerate() {
                        *d = (0..hw).map(|p| g[ci * hw + p] * xv[ci * hw + p] / norms[p]).sum();
                    }
                    accumulate(&mut grads[scale.0], ds);
                }
                if need(x) {
                    let mut dx = vec![0.0; xv.len()];
                    for p in 0..hw {
                        let nrm = norms[p];
                        let clamped = nrm <= ops::L2_EPS;
                        // u = x / n, v = dL/du = g * s
                        let dot: f64 = if clamped {
                            0.0
                        } else {
                            (0..c).map(|ci| (xv[ci * hw + p] / nrm) * g[ci * hw + p] * s[ci]).sum()
                        };
                        for ci in 0..c {
                            let v = g[ci * hw + p] * s[ci];
                            let u = xv[ci * hw + p] / nrm;
                            dx[ci * hw + p] = (v - u * dot) / nrm;
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Concat { a, b } => {
                let split = val(a).numel();
                if need(a) {
                    accumulate(&mut grads[a.0], g[..split].to_vec());
                }
                if need(b) {
                    accumulate(&mut grads[b.0], g[split..].to_vec());
                }
            }
            Op::CrossEntropy { probs, targets, classes } => {
                let p = val(probs).data();
                let mut dp = vec![0.0; p.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let pv = p[r * classes + t];
                    if pv > ops::PROB_FLOOR {
                        dp[r * classes + t] = -g[r] / pv;
                    }
                }
                accumulate(&mut grads[probs.0], dp);
            }
            Op::SmoothL1 { x } => {
                let dx = val(x).data().iter().zip(g).map(|(&v, &gv)| gv * ops::smooth_l1_grad(v)).collect();
                accumulate(&mut grads[x.0], dx);
            }
            Op::Gather { x, idx } => {
                let mut dx = vec![0.0; val(x).numel()];
                for (&i, &gv) in idx.iter().zip(g) {
                    dx[i] += gv;
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Add { a, b } => {
                if need(a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if need(b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if need(a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if need(b) {
                    accumulate(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Scale { x, c } => accumulate(&mut grads[x.0], g.iter().map(|v| v * c).collect()),
            Op::Sum { x } => accumulate(&mut grads[x.0], vec![g[0]; val(x).numel()]),
            Op::MulConst { x, mask } => {
                accumulate(&mut grads[x.0], g.iter().zip(mask).map(|(a, m)| a * m).collect())
            }
            Op::Reshape { x } => accumulate(&mut grads[x.0], g.to_vec()),
            Op::Custom { inputs, rule } => {
                let vals: Vec<&Tensor> = inputs.iter().map(val).collect();
                let needs: Vec<bool> = inputs.iter().map(need).collect();
                let out = rule.backward(g, &vals, &needs);
                for ((v, d), n) in inputs.iter().zip(out).zip(needs) {
                    if let (true, Some(d)) = (n, d) {
                        accumulate(&mut grads[v.0], d);
                    }
                }
            }
        }
    }
}
