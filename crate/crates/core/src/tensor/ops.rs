//! Pure forward operations on [`Tensor`] values.
//!
//! Every function validates shapes and returns a fresh tensor; the gradient
//! tape in [`super::tape`] wraps these with backward rules.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{MitosError, Result};

/// Norm floor used by [`l2_normalize_channels`] for all-zero channel vectors.
pub const L2_EPS: f64 = 1e-12;
/// Probability floor inside [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

pub(crate) fn conv_geom(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(ConvGeom, usize)> {
    let (c, h, w) = input.dims3("conv2d")?;
    let &[o, kc, kh, kw] = kernels.shape() else {
        return Err(MitosError::shape(
            "conv2d",
            "kernels [C_out, C_in, kH, kW]",
            format!("{:?}", kernels.shape()),
        ));
    };
    if kc != c {
        return Err(MitosError::shape(
            "conv2d",
            format!("kernel C_in = input C = {}", c),
            format!("kernel C_in = {}", kc),
        ));
    }
    if stride == 0 {
        return Err(MitosError::invalid("conv2d: stride must be positive"));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(MitosError::shape(
            "conv2d",
            format!("kernel no larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            format!("{}x{}", kh, kw),
        ));
    }
    Ok((ConvGeom::new(c, h, w, kh, kw, stride, pad), o))
}

fn check_bias(op: &'static str, bias: &Tensor, len: usize) -> Result<()> {
    if bias.shape() != [len] {
        return Err(MitosError::shape(op, format!("bias [{}]", len), format!("{:?}", bias.shape())));
    }
    Ok(())
}

/// Zero-padded cross-correlation of `input [C_in, H, W]` with `kernels
/// [C_out, C_in, kH, kW]` plus `bias [C_out]`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (g, o) = conv_geom(input, kernels, stride, pad)?;
    if let Some(b) = bias {
        check_bias("conv2d", b, o)?;
    }
    let out = kernels::conv_forward(input.data(), kernels.data(), bias.map(|b| b.data()), o, &g);
    Tensor::new(vec![o, g.oh, g.ow], out)
}

pub(crate) fn deconv_geom(input: &Tensor, kernels: &Tensor, stride: usize) -> Result<(ConvGeom, usize)> {
    let (cin, h, w) = input.dims3("deconv2d")?;
    let &[kc, cout, kh, kw] = kernels.shape() else {
        return Err(MitosError::shape(
            "deconv2d",
            "kernels [C_in, C_out, kH, kW]",
            format!("{:?}", kernels.shape()),
        ));
    };
    if kc != cin {
        return Err(MitosError::shape(
            "deconv2d",
            format!("kernel C_in = input C = {}", cin),
            format!("kernel C_in = {}", kc),
        ));
    }
    if stride == 0 {
        return Err(MitosError::invalid("deconv2d: stride must be positive"));
    }
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    let g = ConvGeom::new(cout, oh, ow, kh, kw, stride, 0);
    debug_assert_eq!((g.oh, g.ow), (h, w));
    Ok((g, cin))
}

/// Transposed convolution (no padding): output is `[C_out, (H-1)·s + kH, (W-1)·s + kW]`.
pub fn deconv2d(input: &Tensor, kernels: &Tensor, stride: usize) -> Result<Tensor> {
    let (g, cin) = deconv_geom(input, kernels, stride)?;
    let out = kernels::deconv_forward(input.data(), kernels.data(), cin, &g);
    Tensor::new(vec![g.c, g.h, g.w], out)
}

pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    Ok(maxpool2d_with_argmax(input, window, stride)?.0)
}

pub(crate) fn maxpool2d_with_argmax(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = input.dims3("maxpool2d")?;
    if window == 0 || stride == 0 {
        return Err(MitosError::invalid("maxpool2d: window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(MitosError::shape(
            "maxpool2d",
            format!("window <= {}x{}", h, w),
            format!("window {}", window),
        ));
    }
    let (out, arg, oh, ow) = kernels::maxpool_forward(input.data(), c, h, w, window, stride);
    Ok((Tensor::new(vec![c, oh, ow], out)?, arg))
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// `out = W·x + b` for `x: [N]` (or a batch `[B, N]`), `W: [M, N]`, `b: [M]`.
pub fn fully_connected(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, n, batched) = linear_dims(input)?;
    let &[m, wn] = weights.shape() else {
        return Err(MitosError::shape("fully_connected", "weights [M, N]", format!("{:?}", weights.shape())));
    };
    if wn != n {
        return Err(MitosError::shape(
            "fully_connected",
            format!("weights with N = {}", n),
            format!("N = {}", wn),
        ));
    }
    check_bias("fully_connected", bias, m)?;
    let mut out = Vec::with_capacity(rows * m);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    kernels::gemm(rows, n, m, input.data(), false, weights.data(), true, &mut out, 1.0);
    let shape = if batched { vec![rows, m] } else { vec![m] };
    Tensor::new(shape, out)
}

pub(crate) fn linear_dims(input: &Tensor) -> Result<(usize, usize, bool)> {
    match input.shape() {
        &[n] => Ok((1, n, false)),
        &[b, n] => Ok((b, n, true)),
        other => Err(MitosError::shape("fully_connected", "[N] or [B, N]", format!("{:?}", other))),
    }
}

/// Softmax over the last dimension, max-subtracted.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let n = *logits.shape().last().unwrap_or(&0);
    if n == 0 || logits.numel() == 0 {
        return Err(MitosError::invalid("softmax: empty input"));
    }
    let mut out = logits.data().to_vec();
    out.chunks_mut(n).for_each(softmax_in_place);
    Tensor::new(logits.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Softmax across each consecutive group of `group` channels of a
/// `[A·group, H, W]` map, independently at every spatial position.
pub fn grouped_channel_softmax(map: &Tensor, group: usize) -> Result<Tensor> {
    let (c, h, w) = map.dims3("grouped_channel_softmax")?;
    if group == 0 || c % group != 0 {
        return Err(MitosError::shape(
            "grouped_channel_softmax",
            format!("channels divisible by {}", group),
            c,
        ));
    }
    let hw = h * w;
    let src = map.data();
    let mut out = vec![0.0; src.len()];
    let mut buf = vec![0.0; group];
    for a in 0..c / group {
        for p in 0..hw {
            for k in 0..group {
                buf[k] = src[(a * group + k) * hw + p];
            }
            softmax_in_place(&mut buf);
            for k in 0..group {
                out[(a * group + k) * hw + p] = buf[k];
            }
        }
    }
    Tensor::new(map.shape().to_vec(), out)
}

/// Divides every positional channel vector by its Euclidean norm (floored at
/// [`L2_EPS`]) and rescales channel `c` by `scale[c]`.
pub fn l2_normalize_channels(map: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(l2_normalize_with_norms(map, scale)?.0)
}

pub(crate) fn l2_normalize_with_norms(map: &Tensor, scale: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (c, h, w) = map.dims3("l2_normalize_channels")?;
    check_bias("l2_normalize_channels", scale, c)?;
    let hw = h * w;
    let x = map.data();
    let mut norms = vec![0.0; hw];
    for ci in 0..c {
        for (p, n) in norms.iter_mut().enumerate() {
            let v = x[ci * hw + p];
            *n += v * v;
        }
    }
    norms.iter_mut().for_each(|n| *n = n.sqrt().max(L2_EPS));
    let s = scale.data();
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        for p in 0..hw {
            out[ci * hw + p] = s[ci] * x[ci * hw + p] / norms[p];
        }
    }
    Ok((Tensor::new(vec![c, h, w], out)?, norms))
}

/// Stacks `a [C1, H, W]` and `b [C2, H, W]` into `[C1 + C2, H, W]`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (c1, h, w) = a.dims3("concat_channels")?;
    let (c2, h2, w2) = b.dims3("concat_channels")?;
    if (h, w) != (h2, w2) {
        return Err(MitosError::shape(
            "concat_channels",
            format!("spatial {}x{}", h, w),
            format!("{}x{}", h2, w2),
        ));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![c1 + c2, h, w], data)
}

/// Robust regression loss: quadratic inside `|x| < 1`, linear outside.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub(crate) fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// `-ln(probs[true_class])` with the probability floored at [`PROB_FLOOR`].
/// A NaN probability stays NaN.
pub fn cross_entropy(probs: &Tensor, true_class: usize) -> Result<f64> {
    if probs.ndim() != 1 {
        return Err(MitosError::shape("cross_entropy", "[N]", format!("{:?}", probs.shape())));
    }
    let p = probs
        .data()
        .get(true_class)
        .ok_or_else(|| MitosError::invalid(format!("cross_entropy: class {} out of range {}", true_class, probs.numel())))?;
    Ok(neg_log_prob(*p))
}

pub(crate) fn neg_log_prob(p: f64) -> f64 {
    if p.is_nan() {
        p
    } else {
        -p.max(PROB_FLOOR).ln()
    }
}
