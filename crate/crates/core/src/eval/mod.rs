//! Centroid matching at a fixed physical radius, confusion counts,
//! precision/recall/F1 and the mitotic-count grade.

mod report;

use std::fmt;

use indexmap::IndexMap;

use crate::data::{BoxAnnotation, DatasetManifest};
use crate::detection::{ClassId, Detection};
use crate::error::{MitosError, Result};

pub use report::{parse_counts, write_report, GradeWindow, HPF_WINDOW};

/// Matching radius in micrometres.
pub const MATCH_RADIUS_UM: f64 = 8.0;

/// `MATCH_RADIUS_UM / resolution`.
pub fn radius_px(resolution_um_per_px: f64) -> Result<f64> {
    if !(resolution_um_per_px > 0.0) || !resolution_um_per_px.is_finite() {
        return Err(MitosError::invalid(format!("resolution {} must be positive", resolution_um_per_px)));
    }
    Ok(MATCH_RADIUS_UM / resolution_um_per_px)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchCriterion {
    pub radius_um: f64,
    pub resolution_um_per_px: f64,
}

impl MatchCriterion {
    pub fn new(resolution_um_per_px: f64) -> Result<Self> {
        radius_px(resolution_um_per_px)?;
        Ok(MatchCriterion {
            radius_um: MATCH_RADIUS_UM,
            resolution_um_per_px,
        })
    }

    pub fn radius_px(&self) -> f64 {
        self.radius_um / self.resolution_um_per_px
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

/// A detection matched to a ground-truth centroid. Indices refer to the
/// lists passed to [`centroid_match`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pairing {
    pub detection: usize,
    pub gt: usize,
    pub distance_px: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    pub counts: ConfusionCounts,
    pub pairings: Vec<Pairing>,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Greedy one-to-one matching of mitotic-figure detections to mitotic-figure
/// centroids. Detections go in descending score order (ties by position) and
/// claim the nearest unclaimed centroid within the radius (ties by position).
/// Other classes are ignored on both sides.
pub fn centroid_match(detections: &[Detection], gts: &[BoxAnnotation], crit: &MatchCriterion) -> MatchResult {
    let r = crit.radius_px();
    let mut order: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].class_id == ClassId::MitoticFigure)
        .collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
    let gt_idx: Vec<usize> = (0..gts.len()).filter(|&g| gts[g].class_id == ClassId::MitoticFigure).collect();
    let mut claimed = vec![false; gts.len()];
    let mut out = MatchResult::default();
    for &d in &order {
        let c = detections[d].centroid();
        let best = gt_idx
            .iter()
            .filter(|&&g| !claimed[g])
            .map(|&g| (g, dist(c, gts[g].centroid)))
            .filter(|&(_, d)| d <= r)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        match best {
            Some((g, distance_px)) => {
                claimed[g] = true;
                out.counts.tp += 1;
                out.pairings.push(Pairing {
                    detection: d,
                    gt: g,
                    distance_px,
                });
            }
            None => out.counts.fp += 1,
        }
    }
    out.counts.fn_ = gt_idx.len() - out.counts.tp;
    out
}

/// Matching outcome for one image of an evaluated set.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMatches {
    pub image: String,
    pub counts: ConfusionCounts,
    pub pairings: Vec<Pairing>,
    /// Detections of the look-alike class, reported but not scored.
    pub lookalike_detections: usize,
    /// Mitotic-figure detections on this image.
    pub mitosis_detections: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub images: Vec<ImageMatches>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Precision `TP/(TP+FP)`, recall `TP/(TP+FN)` and their harmonic mean;
/// every 0/0 is 0.
pub fn metrics(counts: ConfusionCounts) -> MetricsReport {
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    MetricsReport {
        counts,
        precision,
        recall,
        f1,
        images: Vec::new(),
    }
}

/// Matches every manifest record against its detections at the record's own
/// resolution, sums the counts and computes the metrics once. The detection
/// set must name exactly the manifest's images (images without detections
/// may be absent).
pub fn evaluate_manifest(detections: &IndexMap<String, Vec<Detection>>, manifest: &DatasetManifest) -> Result<MetricsReport> {
    if let Some(unknown) = detections.keys().find(|k| manifest.get(k).is_none()) {
        return Err(MitosError::invalid(format!("detections name image {:?} absent from the manifest", unknown)));
    }
    let none = Vec::new();
    let mut total = ConfusionCounts::default();
    let mut images = Vec::with_capacity(manifest.len());
    for r in &manifest.records {
        let dets = detections.get(&r.image).unwrap_or(&none);
        let m = centroid_match(dets, &r.annotations, &MatchCriterion::new(r.resolution_um_per_px)?);
        total = total + m.counts;
        images.push(ImageMatches {
            image: r.image.clone(),
            counts: m.counts,
            pairings: m.pairings,
            lookalike_detections: dets.iter().filter(|d| d.class_id == ClassId::NotMitoticFigure).count(),
            mitosis_detections: dets.iter().filter(|d| d.class_id == ClassId::MitoticFigure).count(),
        });
    }
    let mut report = metrics(total);
    report.images = images;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grade {
    Low,
    Moderate,
    Severe,
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grade::Low => "low",
            Grade::Moderate => "moderate",
            Grade::Severe => "severe",
        })
    }
}

/// Mitoses per 10 HPF: 0–9 low, 10–19 moderate, 20 and above severe.
pub fn proliferation_grade(mitoses_per_10_hpf: i64) -> Result<Grade> {
    match mitoses_per_10_hpf {
        n if n < 0 => Err(MitosError::invalid(format!("mitotic count {} is negative", n))),
        0..=9 => Ok(Grade::Low),
        10..=19 => Ok(Grade::Moderate),
        _ => Ok(Grade::Severe),
    }
}
