use crate::error::{MitosError, Result};

/// Largest side a decoded box may have before the regression is considered divergent.
pub const MAX_DECODED_SIDE: f64 = 1e4;

/// Axis-aligned box in input-image pixels: top-left corner plus size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(MitosError::invalid(format!("invalid box ({}, {}, {}, {})", x, y, w, h)));
        }
        Ok(BBox { x, y, w, h })
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x && px <= self.right() && py >= self.y && py <= self.bottom()
    }

    /// Intersection with `[0, width] × [0, height]`; `None` if nothing remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = self.right().clamp(0.0, width);
        let y1 = self.bottom().clamp(0.0, height);
        (x1 > x0 && y1 > y0).then(|| BBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> BBox {
        BBox {
            x: self.x * sx,
            y: self.y * sy,
            w: self.w * sx,
            h: self.h * sy,
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }
}

/// Intersection over union; symmetric, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Scale-invariant offsets of a target box relative to a reference box.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BoxDelta {
            tx: v[0],
            ty: v[1],
            tw: v[2],
            th: v[3],
        }
    }
}

/// Offsets taking `anchor` onto `target`, parameterized on the top-left corner:
/// `tx = (x_t − x_a)/w_a`, `ty = (y_t − y_a)/h_a`, `tw = ln(w_t/w_a)`, `th = ln(h_t/h_a)`.
pub fn encode_delta(anchor: &BBox, target: &BBox) -> Result<BoxDelta> {
    if !(anchor.w > 0.0 && anchor.h > 0.0) {
        return Err(MitosError::invalid("encode_delta: anchor must have positive size"));
    }
    if !(target.w > 0.0 && target.h > 0.0) {
        return Err(MitosError::invalid(format!(
            "encode_delta: target size {}x{} is not positive",
            target.w, target.h
        )));
    }
    Ok(BoxDelta {
        tx: (target.x - anchor.x) / anchor.w,
        ty: (target.y - anchor.y) / anchor.h,
        tw: (target.w / anchor.w).ln(),
        th: (target.h / anchor.h).ln(),
    })
}

/// Inverse of [`encode_delta`]. Unclipped.
pub fn apply_delta(anchor: &BBox, delta: &BoxDelta) -> Result<BBox> {
    let d = delta.to_array();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(MitosError::invalid("apply_delta: non-finite offsets"));
    }
    let w = anchor.w * delta.tw.exp();
    let h = anchor.h * delta.th.exp();
    if w > MAX_DECODED_SIDE || h > MAX_DECODED_SIDE {
        return Err(MitosError::invalid(format!(
            "apply_delta: divergent regression ({:.1} x {:.1} px)",
            w, h
        )));
    }
    Ok(BBox {
        x: anchor.x + delta.tx * anchor.w,
        y: anchor.y + delta.ty * anchor.h,
        w,
        h,
    })
}
