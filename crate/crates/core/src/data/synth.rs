//! Synthetic H&E-like frames: a pink-noise eosin background with pale
//! nuclei, dark irregular mitotic figures and dark round look-alikes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BoxAnnotation, HpfFrame, APERIO_UM_PER_PX, INPUT_SIZE};
use crate::detection::ClassId;
use crate::error::{MitosError, Result};
use crate::proposal::BBox;
use crate::tensor::Tensor;

/// Gap kept between generated objects, in pixels.
const OBJECT_GAP: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Frame side in pixels (frames are square).
    pub size: usize,
    pub resolution_um_per_px: f64,
    pub scanner: String,
    /// Inclusive range of mitotic figures per frame.
    pub mitoses: [usize; 2],
    /// Inclusive range of round look-alikes per frame.
    pub lookalikes: [usize; 2],
    /// Inclusive range of both box sides of generated objects, px.
    pub object_size_px: [f64; 2],
    /// Inclusive range of unannotated pale nuclei per frame.
    pub clutter: [usize; 2],
    /// Placement attempts per object before it is given up.
    pub max_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: INPUT_SIZE,
            resolution_um_per_px: APERIO_UM_PER_PX,
            scanner: "synthetic".into(),
            mitoses: [1, 3],
            lookalikes: [0, 2],
            object_size_px: [15.0, 35.0],
            clutter: [4, 10],
            max_attempts: 200,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.object_size_px;
        if self.size < 64 || !(self.resolution_um_per_px > 0.0) {
            return Err(MitosError::invalid("synth: size must be at least 64 and resolution positive"));
        }
        if !(lo >= 4.0 && hi >= lo && hi < self.size as f64 / 2.0) {
            return Err(MitosError::invalid(format!("synth: bad object size range [{}, {}]", lo, hi)));
        }
        for (name, [a, b]) in [("mitoses", self.mitoses), ("lookalikes", self.lookalikes), ("clutter", self.clutter)] {
            if a > b {
                return Err(MitosError::invalid(format!("synth: {} range [{}, {}] is reversed", name, a, b)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthFrame {
    pub frame: HpfFrame,
    pub annotations: Vec<BoxAnnotation>,
    /// Some object could not be placed within the attempt budget.
    pub budget_exhausted: bool,
}

struct Canvas {
    n: usize,
    rgb: Vec<f64>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, color: [f64; 3], alpha: f64) {
        let n = self.n;
        for (k, &c) in color.iter().enumerate() {
            let v = &mut self.rgb[(k * n + y) * n + x];
            *v = *v * (1.0 - alpha) + c * alpha;
        }
    }
}

/// Smooth value noise summed over octaves with amplitude halving per octave.
fn pink_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    let mut cell = 64.0;
    let mut amp = 1.0;
    let mut total = 0.0;
    while cell >= 2.0 {
        let g = (n as f64 / cell).ceil() as usize + 2;
        let grid: Vec<f64> = (0..g * g).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        for y in 0..n {
            let fy = y as f64 / cell;
            let (gy, ty) = (fy.floor() as usize, fy.fract());
            let sy = ty * ty * (3.0 - 2.0 * ty);
            for x in 0..n {
                let fx = x as f64 / cell;
                let (gx, tx) = (fx.floor() as usize, fx.fract());
                let sx = tx * tx * (3.0 - 2.0 * tx);
                let v00 = grid[gy * g + gx];
                let v01 = grid[gy * g + gx + 1];
                let v10 = grid[(gy + 1) * g + gx];
                let v11 = grid[(gy + 1) * g + gx + 1];
                let top = v00 + (v01 - v00) * sx;
                let bot = v10 + (v11 - v10) * sx;
                out[y * n + x] += amp * (top + (bot - top) * sy);
            }
        }
        total += amp;
        amp *= 0.5;
        cell /= 2.0;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Disc primitive in frame coordinates.
#[derive(Clone, Copy)]
struct Disc {
    cx: f64,
    cy: f64,
    r: f64,
}

/// Coverage of a union of discs at a pixel center, with a 1 px soft edge.
fn coverage(discs: &[Disc], px: f64, py: f64) -> f64 {
    discs
        .iter()
        .map(|d| (0.5 - (((px - d.cx).powi(2) + (py - d.cy).powi(2)).sqrt() - d.r)).clamp(0.0, 1.0))
        .fold(0.0, f64::max)
}

struct Shape {
    discs: Vec<Disc>,
    /// Exact extent of pixels with coverage ≥ 0.5, and their centroid.
    bbox: BBox,
    centroid: (f64, f64),
}

fn rasterize(discs: Vec<Disc>, n: usize) -> Option<Shape> {
    let x0 = discs.iter().map(|d| d.cx - d.r).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let x1 = (discs.iter().map(|d| d.cx + d.r).fold(f64::NEG_INFINITY, f64::max).ceil() as usize + 1).min(n);
    let y0 = discs.iter().map(|d| d.cy - d.r).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let y1 = (discs.iter().map(|d| d.cy + d.r).fold(f64::NEG_INFINITY, f64::max).ceil() as usize + 1).min(n);
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (usize::MAX, 0, usize::MAX, 0);
    let (mut sx, mut sy, mut cnt) = (0.0, 0.0, 0.0);
    for y in y0..y1 {
        for x in x0..x1 {
            if coverage(&discs, x as f64 + 0.5, y as f64 + 0.5) >= 0.5 {
                lo_x = lo_x.min(x);
                hi_x = hi_x.max(x);
                lo_y = lo_y.min(y);
                hi_y = hi_y.max(y);
                sx += x as f64 + 0.5;
                sy += y as f64 + 0.5;
                cnt += 1.0;
            }
        }
    }
    if cnt == 0.0 {
        return None;
    }
    let bbox = BBox {
        x: lo_x as f64,
        y: lo_y as f64,
        w: (hi_x - lo_x + 1) as f64,
        h: (hi_y - lo_y + 1) as f64,
    };
    Some(Shape {
        discs,
        bbox,
        centroid: (sx / cnt, sy / cnt),
    })
}

/// Clumped chromatin: several small discs scattered along a random axis.
fn mitosis_discs<R: Rng + ?Sized>(cx: f64, cy: f64, side: f64, rng: &mut R) -> Vec<Disc> {
    let k = rng.random_range(6..=10);
    let angle = rng.random::<f64>() * std::f64::consts::PI;
    let (ca, sa) = (angle.cos(), angle.sin());
    let elong = rng.random_range(1.0..1.6);
    let half = side / 2.0;
    (0..k)
        .map(|_| {
            let r = half * rng.random_range(0.18..0.32);
            let reach = half - r;
            let u = rng.random_range(-1.0..1.0) * reach;
            let v = rng.random_range(-1.0..1.0) * reach / elong;
            Disc {
                cx: cx + u * ca - v * sa,
                cy: cy + u * sa + v * ca,
                r,
            }
        })
        .collect()
}

fn paint_shape<R: Rng + ?Sized>(canvas: &mut Canvas, s: &Shape, class: ClassId, rng: &mut R) {
    let b = s.bbox;
    let (x0, y0) = ((b.x - 2.0).max(0.0) as usize, (b.y - 2.0).max(0.0) as usize);
    let x1 = ((b.right() + 2.0) as usize).min(canvas.n);
    let y1 = ((b.bottom() + 2.0) as usize).min(canvas.n);
    let (cx, cy) = s.centroid;
    let radius = 0.5 * b.w.max(b.h);
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let a = coverage(&s.discs, px, py);
            if a <= 0.0 {
                continue;
            }
            match class {
                ClassId::MitoticFigure => {
                    let j = rng.random_range(-0.05..0.05);
                    canvas.blend(x, y, [0.20 + j, 0.08 + j, 0.32 + j], 0.95 * a);
                }
                _ => {
                    // darker core fading towards the rim
                    let d = (((px - cx).powi(2) + (py - cy).powi(2)).sqrt() / radius).min(1.0);
                    let t = 0.30 + 0.25 * d;
                    canvas.blend(x, y, [t + 0.12, t - 0.02, t + 0.18], 0.9 * a);
                }
            }
        }
    }
}

fn overlaps(b: &BBox, placed: &[BBox]) -> bool {
    let grown = BBox {
        x: b.x - OBJECT_GAP,
        y: b.y - OBJECT_GAP,
        w: b.w + 2.0 * OBJECT_GAP,
        h: b.h + 2.0 * OBJECT_GAP,
    };
    placed.iter().any(|p| grown.intersection_area(p) > 0.0)
}

/// Generates one frame. Object counts are drawn from the configured ranges;
/// every annotation box is the exact pixel extent of its rendered object.
pub fn synth_generate<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<SynthFrame> {
    cfg.validate()?;
    let n = cfg.size;
    let noise = pink_noise(n, rng);
    let base = [0.93, 0.70, 0.82];
    let mut canvas = Canvas {
        n,
        rgb: vec![0.0; 3 * n * n],
    };
    for (i, v) in noise.iter().enumerate() {
        for (k, b) in base.iter().enumerate() {
            canvas.rgb[k * n * n + i] = (b + 0.08 * v + rng.random_range(-0.015..0.015)).clamp(0.0, 1.0);
        }
    }
    for _ in 0..rng.random_range(cfg.clutter[0]..=cfg.clutter[1]) {
        let (cx, cy) = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
        let (rx, ry) = (rng.random_range(6.0..14.0), rng.random_range(6.0..14.0));
        let (x0, x1) = ((cx - rx - 1.0).max(0.0) as usize, ((cx + rx + 1.0) as usize).min(n));
        let (y0, y1) = ((cy - ry - 1.0).max(0.0) as usize, ((cy + ry + 1.0) as usize).min(n));
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let d = (dx * dx + dy * dy).sqrt();
                if d < 1.0 {
                    canvas.blend(x, y, [0.68, 0.52, 0.78], 0.45 * (1.0 - d * d));
                }
            }
        }
    }

    let n_mit = rng.random_range(cfg.mitoses[0]..=cfg.mitoses[1]);
    let n_look = rng.random_range(cfg.lookalikes[0]..=cfg.lookalikes[1]);
    let [lo, hi] = cfg.object_size_px;
    let mut placed: Vec<BBox> = Vec::new();
    let mut annotations = Vec::new();
    let mut exhausted = false;
    let classes = std::iter::repeat_n(ClassId::MitoticFigure, n_mit).chain(std::iter::repeat_n(ClassId::NotMitoticFigure, n_look));
    for class in classes {
        let mut done = false;
        for _ in 0..cfg.max_attempts {
            let side = rng.random_range(lo..=hi);
            let margin = side / 2.0 + 1.0;
            let (cx, cy) = (rng.random_range(margin..n as f64 - margin), rng.random_range(margin..n as f64 - margin));
            let discs = match class {
                ClassId::MitoticFigure => mitosis_discs(cx, cy, side, rng),
                _ => vec![Disc { cx, cy, r: side / 2.0 }],
            };
            let Some(shape) = rasterize(discs, n) else { continue };
            let (bw, bh) = (shape.bbox.w, shape.bbox.h);
            if bw.min(bh) < lo || bw.max(bh) > hi || shape.bbox.right() > n as f64 || shape.bbox.bottom() > n as f64 {
                continue;
            }
            if overlaps(&shape.bbox, &placed) || !shape.bbox.contains_point(shape.centroid.0, shape.centroid.1) {
                continue;
            }
            paint_shape(&mut canvas, &shape, class, rng);
            placed.push(shape.bbox);
            annotations.push(BoxAnnotation::new(shape.bbox, class, shape.centroid)?);
            done = true;
            break;
        }
        exhausted |= !done;
    }
    let pixels = Tensor::new(vec![3, n, n], canvas.rgb)?;
    Ok(SynthFrame {
        frame: HpfFrame::new(pixels, cfg.resolution_um_per_px, cfg.scanner.clone())?,
        annotations,
        budget_exhausted: exhausted,
    })
}
