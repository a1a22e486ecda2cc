//! Slice-level numeric kernels shared by forward ops and their backward rules.

/// `c = op(a) · op(b) + beta · c` for row-major `op(a): m×k`, `op(b): k×n`.
///
/// With `a_t`, `a` is stored as `k×m`; with `b_t`, `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m·k, k·n and m·n elements (checked above
    // in debug builds and guaranteed by every caller's shape validation), and
    // the strides describe in-bounds row-major or transposed views of them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Strided view of a row-major matrix inside a slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = a · b + beta · c` over strided views (`a: m×k`, `b: k×n`, `c: m×n`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    va: View,
    b: &[f64],
    vb: View,
    c: &mut [f64],
    vc: View,
    beta: f64,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(va.last(m, k) < a.len() && vb.last(k, n) < b.len() && vc.last(m, n) < c.len());
    // SAFETY: the asserts above bound the highest element each view touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(va.offset),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.offset),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.offset),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        }
    }

    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Stride-1 kernels are computed as one GEMM per tap over a padded copy
    /// of the input instead of through an im2col buffer.
    fn use_taps(&self) -> bool {
        self.stride == 1 && !self.is_pointwise() && self.c >= 8
    }

    fn padded_w(&self) -> usize {
        self.w + 2 * self.pad
    }

    fn padded_h(&self) -> usize {
        self.h + 2 * self.pad
    }

    /// Length of the "wide" output row-run: outputs live at `oy·Wp + ox`.
    fn wide_len(&self) -> usize {
        (self.oh - 1) * self.padded_w() + self.ow
    }
}

fn pad_input(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    if g.pad == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (g.padded_h(), g.padded_w());
    let mut out = vec![0.0; g.c * hp * wp];
    for ci in 0..g.c {
        for y in 0..g.h {
            let src = &x[(ci * g.h + y) * g.w..(ci * g.h + y + 1) * g.w];
            let d0 = (ci * hp + y + g.pad) * wp + g.pad;
            out[d0..d0 + g.w].copy_from_slice(src);
        }
    }
    out
}

fn tap_views(g: &ConvGeom, ki: usize, kj: usize) -> (View, usize) {
    let kk = g.kh * g.kw;
    let w_view = View {
        offset: ki * g.kw + kj,
        rs: g.c * kk,
        cs: kk,
    };
    (w_view, ki * g.padded_w() + kj)
}

fn conv_forward_taps(x: &[f64], w: &[f64], o: usize, g: &ConvGeom, out: &mut [f64]) {
    let xp = pad_input(x, g);
    let plane = g.padded_h() * g.padded_w();
    let wp = g.padded_w();
    let l = g.wide_len();
    let mut wide = vec![0.0; o * l];
    for ki in 0..g.kh {
        for kj in 0..g.kw {
            let (wv, shift) = tap_views(g, ki, kj);
            let xv = View { offset: shift, rs: plane, cs: 1 };
            let cv = View { offset: 0, rs: l, cs: 1 };
            gemm_view(o, g.c, l, w, wv, &xp, xv, &mut wide, cv, 1.0);
        }
    }
    let n = g.cols();
    for oc in 0..o {
        for oy in 0..g.oh {
            let src = &wide[oc * l + oy * wp..oc * l + oy * wp + g.ow];
            let dst = &mut out[oc * n + oy * g.ow..oc * n + (oy + 1) * g.ow];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }
}

fn conv_backward_taps(x: &[f64], w: &[f64], dy: &[f64], o: usize, g: &ConvGeom, need_dx: bool) -> (Option<Vec<f64>>, Vec<f64>) {
    let xp = pad_input(x, g);
    let plane = g.padded_h() * g.padded_w();
    let wp = g.padded_w();
    let l = g.wide_len();
    let n = g.cols();
    let mut wide = vec![0.0; o * l];
    for oc in 0..o {
        for oy in 0..g.oh {
            wide[oc * l + oy * wp..oc * l + oy * wp + g.ow].copy_from_slice(&dy[oc * n + oy * g.ow..oc * n + (oy + 1) * g.ow]);
        }
    }
    let mut dw = vec![0.0; o * g.rows()];
    let mut dxp = if need_dx { vec![0.0; xp.len()] } else { Vec::new() };
    for ki in 0..g.kh {
        for kj in 0..g.kw {
            let (wv, shift) = tap_views(g, ki, kj);
            let dyv = View { offset: 0, rs: l, cs: 1 };
            // dW_tap[o, c] = Σ_p dY[o, p] · Xp[c, p + shift]
            let xt = View { offset: shift, rs: 1, cs: plane };
            gemm_view(o, l, g.c, &wide, dyv, &xp, xt, &mut dw, wv, 0.0);
            if need_dx {
                let wt = View { offset: wv.offset, rs: wv.cs, cs: wv.rs };
                let dxv = View { offset: shift, rs: plane, cs: 1 };
                gemm_view(g.c, o, l, w, wt, &wide, dyv, &mut dxp, dxv, 1.0);
            }
        }
    }
    let dx = need_dx.then(|| {
        if g.pad == 0 {
            return dxp;
        }
        let mut dx = vec![0.0; g.c * g.h * g.w];
        for ci in 0..g.c {
            for y in 0..g.h {
                let s0 = (ci * g.padded_h() + y + g.pad) * wp + g.pad;
                dx[(ci * g.h + y) * g.w..(ci * g.h + y + 1) * g.w].copy_from_slice(&dxp[s0..s0 + g.w]);
            }
        }
        dx
    });
    (dx, dw)
}

/// Unfolds `x: [c, h, w]` into `[c·kh·kw, oh·ow]` patch columns.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.cols();
    let mut cols = vec![0.0; g.rows() * n];
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if g.stride == 1 {
                        // ix = ox + kj - pad; valid ox range is contiguous
                        let lo = g.pad.saturating_sub(kj);
                        let hi = (g.w + g.pad).saturating_sub(kj).min(g.ow);
                        if lo < hi {
                            let s0 = lo + kj - g.pad;
                            out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds patch columns back onto `[c, h, w]`, summing overlaps into `x`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let n = g.cols();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let seg = &src[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, v) in seg.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution; `w` is `[o, c·kh·kw]`, returns `[o, oh·ow]`.
pub(crate) fn conv_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, o: usize, g: &ConvGeom) -> Vec<f64> {
    let n = g.cols();
    let mut out = vec![0.0; o * n];
    if let Some(b) = bias {
        for (oc, chunk) in out.chunks_mut(n).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[oc]);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.is_pointwise() {
        gemm(o, g.rows(), n, w, false, x, false, &mut out, beta);
    } else if g.use_taps() {
        conv_forward_taps(x, w, o, g, &mut out);
    } else {
        let cols = im2col(x, g);
        gemm(o, g.rows(), n, w, false, &cols, false, &mut out, beta);
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub(crate) fn conv_backward(x: &[f64], w: &[f64], dy: &[f64], o: usize, g: &ConvGeom, need_dx: bool) -> ConvGrads {
    let n = g.cols();
    let k = g.rows();
    let db = dy.chunks(n).map(|c| c.iter().sum()).collect();
    if g.use_taps() {
        let (dx, dw) = conv_backward_taps(x, w, dy, o, g, need_dx);
        return ConvGrads { dx, dw, db };
    }
    let owned;
    let cols: &[f64] = if g.is_pointwise() {
        x
    } else {
        owned = im2col(x, g);
        &owned
    };
    let mut dw = vec![0.0; o * k];
    gemm(o, n, k, dy, false, cols, true, &mut dw, 0.0);
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0; k * n];
        gemm(k, o, n, w, true, dy, false, &mut dcols, 0.0);
        if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![0.0; g.c * g.h * g.w];
            col2im(&dcols, g, &mut dx);
            dx
        }
    });
    ConvGrads { dx, dw, db }
}

/// Transposed convolution. `g` describes the adjoint convolution that maps
/// the deconv *output* (`[cout, g.h, g.w]`) back to its input (`[cin, g.oh, g.ow]`);
/// `w` is `[cin, cout·kh·kw]`.
pub(crate) fn deconv_forward(x: &[f64], w: &[f64], cin: usize, g: &ConvGeom) -> Vec<f64> {
    let n = g.cols();
    let k = g.rows();
    let mut cols = vec![0.0; k * n];
    gemm(k, cin, n, w, true, x, false, &mut cols, 0.0);
    let mut out = vec![0.0; g.c * g.h * g.w];
    col2im(&cols, g, &mut out);
    out
}

pub(crate) fn deconv_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    cin: usize,
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>) {
    let n = g.cols();
    let k = g.rows();
    let dcols = im2col(dy, g);
    let mut dw = vec![0.0; cin * k];
    gemm(cin, n, k, x, false, &dcols, true, &mut dw, 0.0);
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; cin * n];
        gemm(cin, k, n, w, false, &dcols, false, &mut dx, 0.0);
        dx
    });
    (dx, dw)
}

/// Max pooling; returns pooled values and the flat input index of each max.
pub(crate) fn maxpool_forward(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + oy * stride * w + ox * stride;
                for ky in 0..window {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..window {
                        let v = x[row + kx];
                        // strict: the first maximum in scan order wins ties
                        if v > best {
                            best = v;
                            best_i = row + kx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg, oh, ow)
}
