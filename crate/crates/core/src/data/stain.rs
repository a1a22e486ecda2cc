//! Color-statistics transfer in the decorrelated `lαβ` space: RGB → LMS cone
//! space → log → `lαβ`, match per-channel mean and standard deviation to a
//! target, and map back.

use crate::error::{MitosError, Result};
use crate::tensor::Tensor;

const RGB_TO_LMS: [[f64; 3]; 3] = [[0.3811, 0.5783, 0.0402], [0.1967, 0.7244, 0.0782], [0.0241, 0.1288, 0.8444]];
/// Keeps `log10` finite on black pixels.
const LOG_EPS: f64 = 1e-10;
/// Floor on a channel variance before dividing by it.
const MIN_VARIANCE: f64 = 1e-6;

/// Per-channel mean and standard deviation in `lαβ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StainStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn invert(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    [
        [c(1, 2, 1, 2) / det, -c(0, 2, 1, 2) / det, c(0, 1, 1, 2) / det],
        [-c(1, 2, 0, 2) / det, c(0, 2, 0, 2) / det, -c(0, 1, 0, 2) / det],
        [c(1, 2, 0, 1) / det, -c(0, 2, 0, 1) / det, c(0, 1, 0, 1) / det],
    ]
}

fn to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lms = mat_vec(&RGB_TO_LMS, rgb).map(|v| (v.max(0.0) + LOG_EPS).log10());
    let (s3, s6, s2) = (3f64.sqrt(), 6f64.sqrt(), 2f64.sqrt());
    [
        (lms[0] + lms[1] + lms[2]) / s3,
        (lms[0] + lms[1] - 2.0 * lms[2]) / s6,
        (lms[0] - lms[1]) / s2,
    ]
}

fn from_lab(lab: [f64; 3], lms_to_rgb: &[[f64; 3]; 3]) -> [f64; 3] {
    let (a, b, c) = (lab[0] / 3f64.sqrt(), lab[1] / 6f64.sqrt(), lab[2] / 2f64.sqrt());
    let log_lms = [a + b + c, a + b - c, a - 2.0 * b];
    let lms = log_lms.map(|v| 10f64.powf(v) - LOG_EPS);
    mat_vec(lms_to_rgb, lms)
}

fn lab_pixels(img: &Tensor) -> Result<Vec<[f64; 3]>> {
    let (c, h, w) = img.dims3("stain_normalize")?;
    if c != 3 {
        return Err(MitosError::shape("stain_normalize", "3 channels", c));
    }
    let n = h * w;
    let d = img.data();
    Ok((0..n).map(|i| to_lab([d[i], d[n + i], d[2 * n + i]])).collect())
}

fn stats_of(lab: &[[f64; 3]]) -> StainStats {
    let n = lab.len().max(1) as f64;
    let mean: [f64; 3] = std::array::from_fn(|k| lab.iter().map(|p| p[k]).sum::<f64>() / n);
    let std = std::array::from_fn(|k| (lab.iter().map(|p| (p[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt());
    StainStats { mean, std }
}

pub fn stain_stats(img: &Tensor) -> Result<StainStats> {
    Ok(stats_of(&lab_pixels(img)?))
}

/// Maps `img`'s `lαβ` statistics onto `target` and clamps the result to `[0, 1]`.
/// Channels with (near) zero variance have their variance raised to `1e-6`.
pub fn stain_normalize(img: &Tensor, target: &StainStats) -> Result<Tensor> {
    let lab = lab_pixels(img)?;
    let src = stats_of(&lab);
    let inv = invert(&RGB_TO_LMS);
    let gain: [f64; 3] = std::array::from_fn(|k| target.std[k] / src.std[k].powi(2).max(MIN_VARIANCE).sqrt());
    let n = lab.len();
    let mut out = vec![0.0; 3 * n];
    for (i, p) in lab.iter().enumerate() {
        let moved = std::array::from_fn(|k| (p[k] - src.mean[k]) * gain[k] + target.mean[k]);
        let rgb = from_lab(moved, &inv);
        for k in 0..3 {
            out[k * n + i] = rgb[k].clamp(0.0, 1.0);
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}
