use super::{BoxAnnotation, HpfFrame};
use crate::error::{MitosError, Result};
use crate::proposal::BBox;
use crate::tensor::Tensor;

/// Tiles per side; a frame is cut into `TILE_GRID²` sub-images.
pub const TILE_GRID: usize = 4;
/// Clockwise rotations used for augmentation.
pub const ROTATIONS: [u32; 3] = [90, 180, 270];
/// Clipped annotations keeping less than this share of their area are dropped.
const MIN_KEPT_AREA: f64 = 0.25;

/// Boundaries `floor(i·n/4)` for `i = 0..=4`.
pub fn tile_bounds(n: usize) -> [usize; TILE_GRID + 1] {
    std::array::from_fn(|i| i * n / TILE_GRID)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    /// Row-major tile index, `row · 4 + col`.
    pub index: usize,
    /// Top-left corner of the tile in frame pixels.
    pub origin: (usize, usize),
    pub pixels: Tensor,
    /// Annotations in tile coordinates.
    pub annotations: Vec<BoxAnnotation>,
}

fn tile_of(v: f64, bounds: &[usize; TILE_GRID + 1]) -> usize {
    (0..TILE_GRID).rev().find(|&i| v >= bounds[i] as f64).unwrap_or(0)
}

/// Cuts a frame into a 4×4 grid. Each annotation goes to the tile holding its
/// centroid, its box clipped to that tile; it is dropped when the clipped box
/// keeps less than a quarter of the original area.
pub fn tile_frame(frame: &HpfFrame, annotations: &[BoxAnnotation]) -> Result<Vec<Tile>> {
    let (h, w) = (frame.height(), frame.width());
    if h < TILE_GRID || w < TILE_GRID {
        return Err(MitosError::invalid(format!("frame {}x{} too small to tile", h, w)));
    }
    let (ys, xs) = (tile_bounds(h), tile_bounds(w));
    let src = frame.pixels.data();
    let mut tiles = Vec::with_capacity(TILE_GRID * TILE_GRID);
    for ty in 0..TILE_GRID {
        for tx in 0..TILE_GRID {
            let (x0, x1, y0, y1) = (xs[tx], xs[tx + 1], ys[ty], ys[ty + 1]);
            let (th, tw) = (y1 - y0, x1 - x0);
            let mut data = Vec::with_capacity(3 * th * tw);
            for c in 0..3 {
                for y in y0..y1 {
                    data.extend_from_slice(&src[(c * h + y) * w + x0..(c * h + y) * w + x1]);
                }
            }
            tiles.push(Tile {
                index: ty * TILE_GRID + tx,
                origin: (x0, y0),
                pixels: Tensor::new(vec![3, th, tw], data)?,
                annotations: Vec::new(),
            });
        }
    }
    for a in annotations {
        let (cx, cy) = a.centroid;
        let t = &mut tiles[tile_of(cy, &ys) * TILE_GRID + tile_of(cx, &xs)];
        let (ox, oy) = (t.origin.0 as f64, t.origin.1 as f64);
        let (tw, th) = (t.pixels.shape()[2] as f64, t.pixels.shape()[1] as f64);
        let Some(clipped) = a.bbox.translated(-ox, -oy).clip(tw, th) else { continue };
        if clipped.area() < MIN_KEPT_AREA * a.bbox.area() {
            continue;
        }
        let centroid = (cx - ox, cy - oy);
        if let Ok(moved) = BoxAnnotation::new(clipped, a.class_id, centroid) {
            t.annotations.push(moved);
        }
    }
    Ok(tiles)
}

/// Bilinear resampling to `size × size` with half-pixel-center alignment;
/// boxes and centroids are scaled by `(size/W, size/H)`. Returns the factors.
pub fn resize_to_input(img: &Tensor, annotations: &[BoxAnnotation], size: usize) -> Result<(Tensor, Vec<BoxAnnotation>, (f64, f64))> {
    let (c, h, w) = img.dims3("resize_to_input")?;
    if size == 0 || h == 0 || w == 0 {
        return Err(MitosError::invalid("resize_to_input: empty image or target"));
    }
    let sx = size as f64 / w as f64;
    let sy = size as f64 / h as f64;
    let out = if h == size && w == size {
        img.clone()
    } else {
        let axis = |n: usize, scale: f64| -> Vec<(usize, usize, f64)> {
            (0..size)
                .map(|d| {
                    let s = ((d as f64 + 0.5) / scale - 0.5).clamp(0.0, (n - 1) as f64);
                    let i0 = s.floor() as usize;
                    let i1 = (i0 + 1).min(n - 1);
                    (i0, i1, s - i0 as f64)
                })
                .collect()
        };
        let (ax, ay) = (axis(w, sx), axis(h, sy));
        let d = img.data();
        let mut out = Vec::with_capacity(c * size * size);
        for ch in 0..c {
            let plane = &d[ch * h * w..(ch + 1) * h * w];
            for &(y0, y1, fy) in &ay {
                for &(x0, x1, fx) in &ax {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        Tensor::new(vec![c, size, size], out)?
    };
    let anns = annotations
        .iter()
        .map(|a| {
            let mut b = a.bbox.scaled(sx, sy);
            // keep boxes inside the frame despite rounding of the products
            b.w = b.w.min(size as f64 - b.x);
            b.h = b.h.min(size as f64 - b.y);
            BoxAnnotation {
                bbox: b,
                class_id: a.class_id,
                centroid: (a.centroid.0 * sx, a.centroid.1 * sy),
            }
        })
        .collect();
    Ok((out, anns, (sx, sy)))
}

fn rotate90(img: &Tensor, anns: &[BoxAnnotation]) -> (Tensor, Vec<BoxAnnotation>) {
    let n = img.shape()[1];
    let d = img.data();
    let mut out = vec![0.0; d.len()];
    for c in 0..3 {
        let base = c * n * n;
        for r in 0..n {
            for col in 0..n {
                // (r, col) moves to (col, n - 1 - r)
                out[base + col * n + (n - 1 - r)] = d[base + r * n + col];
            }
        }
    }
    let nf = n as f64;
    let anns = anns
        .iter()
        .map(|a| BoxAnnotation {
            bbox: BBox {
                // rounding in y + h may overshoot the edge by an ulp
                x: (nf - a.bbox.y - a.bbox.h).max(0.0),
                y: a.bbox.x,
                w: a.bbox.h,
                h: a.bbox.w,
            },
            class_id: a.class_id,
            centroid: (nf - a.centroid.1, a.centroid.0),
        })
        .collect();
    (Tensor::new(img.shape().to_vec(), out).expect("same shape"), anns)
}

/// Lossless clockwise rotation of a square image by 90, 180 or 270 degrees.
/// For 90° on an `N×N` image a box `(x, y, w, h)` becomes `(N−y−h, x, h, w)`.
pub fn rotate_augment(img: &Tensor, annotations: &[BoxAnnotation], angle: u32) -> Result<(Tensor, Vec<BoxAnnotation>)> {
    let (c, h, w) = img.dims3("rotate_augment")?;
    if c != 3 || h != w {
        return Err(MitosError::shape("rotate_augment", "square [3, N, N]", format!("{:?}", img.shape())));
    }
    if !ROTATIONS.contains(&angle) {
        return Err(MitosError::invalid(format!("rotation {} not one of {:?}", angle, ROTATIONS)));
    }
    let (mut t, mut a) = rotate90(img, annotations);
    for _ in 1..angle / 90 {
        (t, a) = rotate90(&t, &a);
    }
    Ok((t, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::ClassId;

    #[test]
    fn bounds_for_1539() {
        let b = tile_bounds(1539);
        let widths: Vec<usize> = b.windows(2).map(|p| p[1] - p[0]).collect();
        assert_eq!(widths, vec![384, 385, 385, 385]);
    }

    #[test]
    fn rotation_formula() {
        let img = Tensor::zeros(&[3, 299, 299]);
        let a = BoxAnnotation::centered(BBox::new(10.0, 20.0, 30.0, 40.0).unwrap(), ClassId::MitoticFigure).unwrap();
        let (_, r) = rotate_augment(&img, &[a], 90).unwrap();
        assert_eq!(r[0].bbox, BBox { x: 239.0, y: 10.0, w: 40.0, h: 30.0 });
        assert!(rotate_augment(&img, &[a], 45).is_err());
    }

    #[test]
    fn resize_box_scaling() {
        let img = Tensor::zeros(&[3, 598, 598]);
        let a = BoxAnnotation::centered(BBox::new(10.0, 10.0, 20.0, 20.0).unwrap(), ClassId::MitoticFigure).unwrap();
        let (t, r, s) = resize_to_input(&img, &[a], 299).unwrap();
        assert_eq!(t.shape(), &[3, 299, 299]);
        assert_eq!(r[0].bbox, BBox { x: 5.0, y: 5.0, w: 10.0, h: 10.0 });
        assert_eq!(s, (0.5, 0.5));
    }
}
