use crate::error::{MitosError, Result};
use crate::proposal::BBox;
use crate::tensor::{CustomBackward, Tape, Tensor, Var};

/// Marks a pooled bin that covered no map cell.
const EMPTY_BIN: usize = usize::MAX;

/// Cell range `[lo, hi)` covered by `[a, b)` in image pixels on a map with `n`
/// cells. The map covers `floor(size / stride)` cells, so a box in the strip
/// of fewer than `stride` pixels past the last cell takes that cell.
fn cell_span(a: f64, b: f64, stride: f64, n: usize) -> Option<(usize, usize)> {
    if n == 0 || b <= 0.0 || a >= (n + 1) as f64 * stride {
        return None;
    }
    let lo = (a / stride).floor().clamp(0.0, (n - 1) as f64);
    let hi = (b / stride).ceil().min(n as f64).max(lo + 1.0);
    Some((lo as usize, hi as usize))
}

/// Max-pools the region of `map: [C, H, W]` under `bbox` (image pixels,
/// map cells are `stride` pixels wide) into `out_h × out_w` bins.
///
/// Bin `i` along an axis spanning `span` cells covers offsets
/// `floor(i·span/out) .. floor((i+1)·span/out)`; bins that cover nothing are 0.
pub fn roi_pool(map: &Tensor, bbox: &BBox, stride: f64, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (values, _) = roi_pool_with_argmax(map, std::slice::from_ref(bbox), stride, out_h, out_w)?;
    let c = map.shape()[0];
    Tensor::new(vec![c, out_h, out_w], values)
}

/// Pools every box; returns `[R · C · out_h · out_w]` values and the flat map
/// index each came from.
pub fn roi_pool_with_argmax(
    map: &Tensor,
    boxes: &[BBox],
    stride: f64,
    out_h: usize,
    out_w: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let (c, h, w) = map.dims3("roi_pool")?;
    if out_h == 0 || out_w == 0 || !(stride > 0.0) {
        return Err(MitosError::invalid("roi_pool: output size and stride must be positive"));
    }
    let data = map.data();
    let per = c * out_h * out_w;
    let mut values = vec![0.0; boxes.len() * per];
    let mut arg = vec![EMPTY_BIN; boxes.len() * per];
    for (r, b) in boxes.iter().enumerate() {
        let (Some((x0, x1)), Some((y0, y1))) = (
            cell_span(b.x, b.right(), stride, w),
            cell_span(b.y, b.bottom(), stride, h),
        ) else {
            return Err(MitosError::invalid(format!(
                "roi_pool: box ({}, {}, {}, {}) lies outside the {}x{} map",
                b.x, b.y, b.w, b.h, h, w
            )));
        };
        let (sh, sw) = (y1 - y0, x1 - x0);
        for ci in 0..c {
            let plane = ci * h * w;
            for by in 0..out_h {
                let ya = y0 + by * sh / out_h;
                let yb = y0 + (by + 1) * sh / out_h;
                for bx in 0..out_w {
                    let xa = x0 + bx * sw / out_w;
                    let xb = x0 + (bx + 1) * sw / out_w;
                    let o = r * per + (ci * out_h + by) * out_w + bx;
                    let mut best = f64::NEG_INFINITY;
                    for y in ya..yb {
                        for x in xa..xb {
                            let i = plane + y * w + x;
                            if data[i] > best {
                                best = data[i];
                                arg[o] = i;
                            }
                        }
                    }
                    if arg[o] != EMPTY_BIN {
                        values[o] = best;
                    }
                }
            }
        }
    }
    Ok((values, arg))
}

struct RoiPoolRule {
    argmax: Vec<usize>,
}

impl CustomBackward for RoiPoolRule {
    fn backward(&self, grad_out: &[f64], inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let mut g = vec![0.0; inputs[0].numel()];
        for (&i, &d) in self.argmax.iter().zip(grad_out) {
            if i != EMPTY_BIN {
                g[i] += d;
            }
        }
        vec![Some(g)]
    }

    fn selections(&self) -> &[usize] {
        &self.argmax
    }
}

/// Differentiable ROI pooling of `boxes` over `map`; output `[R, C·out_h·out_w]`.
pub fn roi_pool_tape(tape: &mut Tape, map: Var, boxes: &[BBox], stride: f64, out_h: usize, out_w: usize) -> Result<Var> {
    let (values, argmax) = roi_pool_with_argmax(tape.value(map), boxes, stride, out_h, out_w)?;
    let per = tape.value(map).shape()[0] * out_h * out_w;
    let out = Tensor::new(vec![boxes.len(), per], values)?;
    Ok(tape.custom(vec![map], out, Box::new(RoiPoolRule { argmax })))
}
