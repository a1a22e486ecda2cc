use std::fmt::Write;

use super::{proliferation_grade, ConfusionCounts, Grade, MetricsReport};
use crate::error::{MitosError, Result};

/// High-power fields per grading window.
pub const HPF_WINDOW: usize = 10;

/// Mitotic counts of ten consecutive images; the last window may be shorter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradeWindow {
    pub hpf: usize,
    pub detected: usize,
    pub annotated: usize,
    /// From the detected count.
    pub grade: Grade,
}

impl MetricsReport {
    /// Windows over `images` in report order.
    pub fn grade_windows(&self) -> Vec<GradeWindow> {
        self.images
            .chunks(HPF_WINDOW)
            .map(|w| {
                let detected = w.iter().map(|m| m.mitosis_detections).sum();
                GradeWindow {
                    hpf: w.len(),
                    detected,
                    annotated: w.iter().map(|m| m.counts.tp + m.counts.fn_).sum(),
                    grade: proliferation_grade(detected as i64).expect("count is non-negative"),
                }
            })
            .collect()
    }
}

/// A human summary followed by a `[metrics]` section of `key=value` lines.
pub fn write_report(report: &MetricsReport) -> String {
    let c = report.counts;
    let mut s = String::new();
    let _ = writeln!(s, "Mitosis detection report");
    let _ = writeln!(s, "  images          {}", report.images.len());
    let _ = writeln!(s, "  true positives  {}", c.tp);
    let _ = writeln!(s, "  false positives {}", c.fp);
    let _ = writeln!(s, "  false negatives {}", c.fn_);
    let _ = writeln!(s, "  precision       {:.3}", report.precision);
    let _ = writeln!(s, "  recall          {:.3}", report.recall);
    let _ = writeln!(s, "  F1              {:.3}", report.f1);
    let windows = report.grade_windows();
    for (i, w) in windows.iter().enumerate() {
        let _ = writeln!(s, "  window {:<3}      {} mitoses in {} HPF -> {}", i, w.detected, w.hpf, w.grade);
    }
    let _ = writeln!(s, "\n[metrics]");
    let _ = writeln!(s, "images={}", report.images.len());
    let _ = writeln!(s, "tp={}", c.tp);
    let _ = writeln!(s, "fp={}", c.fp);
    let _ = writeln!(s, "fn={}", c.fn_);
    let _ = writeln!(s, "precision={:.6}", report.precision);
    let _ = writeln!(s, "recall={:.6}", report.recall);
    let _ = writeln!(s, "f1={:.6}", report.f1);
    let look: usize = report.images.iter().map(|m| m.lookalike_detections).sum();
    let _ = writeln!(s, "lookalike_detections={}", look);
    for (i, w) in windows.iter().enumerate() {
        let _ = writeln!(s, "window.{}.hpf={}", i, w.hpf);
        let _ = writeln!(s, "window.{}.detected={}", i, w.detected);
        let _ = writeln!(s, "window.{}.annotated={}", i, w.annotated);
        let _ = writeln!(s, "window.{}.grade={}", i, w.grade);
    }
    s
}

/// Reads confusion counts either as `tp=…`, `fp=…`, `fn=…` lines or as a
/// single `tp,fp,fn` line. `#` starts a comment.
pub fn parse_counts(text: &str) -> Result<ConfusionCounts> {
    let lines: Vec<&str> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .collect();
    let num = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| MitosError::invalid(format!("bad count {:?}", s)))
    };
    if let [single] = lines.as_slice() {
        if !single.contains('=') {
            let f: Vec<&str> = single.split(',').collect();
            if f.len() != 3 {
                return Err(MitosError::invalid(format!("expected tp,fp,fn, found {:?}", single)));
            }
            return Ok(ConfusionCounts {
                tp: num(f[0])?,
                fp: num(f[1])?,
                fn_: num(f[2])?,
            });
        }
    }
    let (mut tp, mut fp, mut fn_) = (None, None, None);
    for l in lines {
        let Some((k, v)) = l.split_once('=') else {
            return Err(MitosError::invalid(format!("expected key=value, found {:?}", l)));
        };
        match k.trim() {
            "tp" => tp = Some(num(v)?),
            "fp" => fp = Some(num(v)?),
            "fn" => fn_ = Some(num(v)?),
            _ => {}
        }
    }
    match (tp, fp, fn_) {
        (Some(tp), Some(fp), Some(fn_)) => Ok(ConfusionCounts { tp, fp, fn_ }),
        _ => Err(MitosError::invalid("counts need tp, fp and fn")),
    }
}
