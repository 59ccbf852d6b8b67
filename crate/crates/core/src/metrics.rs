//! Evaluation metrics: 2D IoU over boxes and masks, COCO-style average
//! precision / mAP with greedy per-image matching and 101-point
//! interpolation, and A3DP (average precision for 3D pose) under joint
//! translation / rotation / shape thresholds in absolute or
//! distance-relative flavors.

use crate::geom::Pose;
use crate::scene::RleMask;
use crate::template::Dimensions;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction {index} has a non-finite score")]
    MissingScores { index: usize },
}

/// A detection footprint: an axis-aligned pixel box `[x0, y0, x1, y1]` or a
/// run-length mask.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Box([f64; 4]),
    Mask(RleMask),
}

impl Region {
    fn assert_valid(&self) {
        if let Region::Box(b) = self {
            assert!(b.iter().all(|v| v.is_finite()), "box must be finite");
            assert!(b[0] <= b[2] && b[1] <= b[3], "box must be well-ordered");
        }
    }
}

/// One scored detection, optionally carrying a pose hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub region: Region,
    pub score: f64,
    pub pose: Option<Pose>,
    pub dimensions: Option<Dimensions>,
    pub shape_id: Option<u32>,
}

impl Detection {
    pub fn new(region: Region, score: f64) -> Self {
        assert!(score.is_finite(), "detection score must be finite");
        region.assert_valid();
        Self {
            region,
            score,
            pose: None,
            dimensions: None,
            shape_id: None,
        }
    }
}

/// Detections and ground truth for one image; matching never crosses image
/// boundaries.
#[derive(Debug, Clone, Default)]
pub struct EvalImage {
    pub detections: Vec<Detection>,
    pub truths: Vec<Region>,
}

/// The standard COCO threshold sweep 0.50:0.05:0.95.
pub const COCO_IOU_THRESHOLDS: [f64; 10] =
    [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Intersection-over-union of two regions. Box pairs are measured in
/// continuous coordinates; masks on their decoded bitmaps (dimensions must
/// agree); a mixed pair rasterizes the box onto the mask's pixel grid by
/// center coverage. An empty union yields 0.
pub fn iou_2d(a: &Region, b: &Region) -> f64 {
    a.assert_valid();
    b.assert_valid();
    match (a, b) {
        (Region::Box(a), Region::Box(b)) => {
            let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
            let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
            let inter = iw * ih;
            let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
            if union <= 0.0 {
                0.0
            } else {
                inter / union
            }
        }
        (Region::Mask(a), Region::Mask(b)) => {
            assert_eq!(
                (a.width, a.height),
                (b.width, b.height),
                "mask dimensions must agree"
            );
            let (ab, bb) = (a.to_bitmap(), b.to_bitmap());
            let mut inter = 0u64;
            let mut union = 0u64;
            for (&x, &y) in ab.iter().zip(&bb) {
                inter += u64::from(x && y);
                union += u64::from(x || y);
            }
            if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            }
        }
        (Region::Box(bx), Region::Mask(m)) | (Region::Mask(m), Region::Box(bx)) => {
            let boxed = Region::Mask(RleMask::encode(m.width, m.height, |x, y| {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                cx >= bx[0] && cx < bx[2] && cy >= bx[1] && cy < bx[3]
            }));
            iou_2d(&boxed, &Region::Mask(m.clone()))
        }
    }
}

/// Greedy per-image matching: detections in descending score order each
/// claim the unmatched truth of highest IoU, provided it reaches the
/// threshold. Returns pooled `(score, is_tp)` labels plus the truth count.
fn match_images(images: &[EvalImage], iou_threshold: f64) -> (Vec<(f64, bool)>, usize) {
    let mut labels = Vec::new();
    let mut total_gt = 0usize;
    for img in images {
        total_gt += img.truths.len();
        let mut order: Vec<usize> = (0..img.detections.len()).collect();
        order.sort_by(|&a, &b| img.detections[b].score.total_cmp(&img.detections[a].score));
        let mut taken = vec![false; img.truths.len()];
        for &d in &order {
            let det = &img.detections[d];
            let mut best: Option<(f64, usize)> = None;
            for (g, gt) in img.truths.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = iou_2d(&det.region, gt);
                if iou >= iou_threshold && best.map_or(true, |(bi, _)| iou > bi) {
                    best = Some((iou, g));
                }
            }
            if let Some((_, g)) = best {
                taken[g] = true;
                labels.push((det.score, true));
            } else {
                labels.push((det.score, false));
            }
        }
    }
    labels.sort_by(|a, b| b.0.total_cmp(&a.0));
    (labels, total_gt)
}

/// Area under the interpolated precision-recall curve, 101 recall points.
fn ap_from_labels(labels: &[(f64, bool)], total_gt: usize) -> f64 {
    if total_gt == 0 {
        // No truth to recall: vacuous success only without detections.
        return if labels.is_empty() { 1.0 } else { 0.0 };
    }
    let mut curve = Vec::with_capacity(labels.len());
    let mut tp = 0usize;
    for (rank, &(_, is_tp)) in labels.iter().enumerate() {
        tp += usize::from(is_tp);
        let precision = tp as f64 / (rank + 1) as f64;
        let recall = tp as f64 / total_gt as f64;
        curve.push((recall, precision));
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = curve
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, prec)| *prec)
            .fold(0.0f64, f64::max);
        sum += p;
    }
    sum / 101.0
}

/// Mean AP over the given IoU thresholds (a single threshold gives plain
/// AP). Pass [`COCO_IOU_THRESHOLDS`] for the usual mAP.
pub fn average_precision(images: &[EvalImage], iou_thresholds: &[f64]) -> f64 {
    assert!(!iou_thresholds.is_empty(), "need at least one threshold");
    let sum: f64 = iou_thresholds
        .iter()
        .map(|&t| {
            let (labels, total) = match_images(images, t);
            ap_from_labels(&labels, total)
        })
        .sum();
    sum / iou_thresholds.len() as f64
}

/// Translation distance in meters, geodesic rotation angle in radians, and
/// aligned-box shape similarity between two (pose, dimensions) hypotheses.
///
/// Shape similarity is the 3D IoU of the two dimension boxes placed at a
/// common origin with aligned axes — a proxy for a model-similarity lookup
/// when no shape library is available.
pub fn pose_error(
    est: (&Pose, &Dimensions),
    gt: (&Pose, &Dimensions),
) -> (f64, f64, f64) {
    let trans = est.0.translation_distance_to(gt.0);
    let rot = est.0.rotation_angle_to(gt.0);
    (trans, rot, shape_similarity(est.1, gt.1))
}

fn shape_similarity(a: &Dimensions, b: &Dimensions) -> f64 {
    let inter = a.w.min(b.w) * a.h.min(b.h) * a.l.min(b.l);
    let union = a.w * a.h * a.l + b.w * b.h * b.l - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Whether thresholds are absolute meters or scaled by each truth's
/// distance from the camera (`|t_gt|`; poses are expected camera-frame in
/// `Rel` mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum A3dpMode {
    Abs,
    Rel,
}

/// Joint pose-accuracy thresholds: ten `(translation, rotation,
/// shape_sim)` levels from loose to strict.
#[derive(Debug, Clone, PartialEq)]
pub struct A3dpConfig {
    pub levels: Vec<(f64, f64, f64)>,
    pub mode: A3dpMode,
    pub loose_index: usize,
    pub strict_index: usize,
}

impl A3dpConfig {
    pub fn new(
        levels: Vec<(f64, f64, f64)>,
        mode: A3dpMode,
        loose_index: usize,
        strict_index: usize,
    ) -> Self {
        assert!(!levels.is_empty());
        assert!(loose_index < levels.len() && strict_index < levels.len());
        for w in levels.windows(2) {
            assert!(
                w[1].0 <= w[0].0 && w[1].1 <= w[0].1 && w[1].2 >= w[0].2,
                "levels must tighten monotonically"
            );
        }
        Self {
            levels,
            mode,
            loose_index,
            strict_index,
        }
    }

    /// ApolloCar3D-style default ladder: translation 2.8 → 0.1 m, rotation
    /// π/6 → π/60 rad, shape similarity 0.5 → 0.95, linear over ten levels;
    /// loose level 0, strict level 5.
    pub fn abs_default() -> Self {
        Self::new(Self::default_levels(), A3dpMode::Abs, 0, 5)
    }

    /// The same ladder with translation read relative to truth distance.
    pub fn rel_default() -> Self {
        Self::new(Self::default_levels(), A3dpMode::Rel, 0, 5)
    }

    fn default_levels() -> Vec<(f64, f64, f64)> {
        use std::f64::consts::PI;
        (0..10)
            .map(|i| {
                let f = i as f64 / 9.0;
                (
                    2.8 + f * (0.1 - 2.8),
                    PI / 6.0 + f * (PI / 60.0 - PI / 6.0),
                    0.5 + f * (0.95 - 0.5),
                )
            })
            .collect()
    }
}

/// A scored pose hypothesis for A3DP evaluation. Without a dimensions
/// hypothesis the shape criterion is vacuously satisfied (similarity 1).
#[derive(Debug, Clone, PartialEq)]
pub struct PosePrediction {
    pub pose: Pose,
    pub dimensions: Option<Dimensions>,
    pub score: f64,
}

/// Ground-truth pose and dimensions for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTruth {
    pub pose: Pose,
    pub dimensions: Dimensions,
}

/// Pose predictions and truths for one image.
#[derive(Debug, Clone, Default)]
pub struct PoseEvalImage {
    pub predictions: Vec<PosePrediction>,
    pub truths: Vec<PoseTruth>,
}

/// A3DP summary: mean AP over all levels plus the loose and strict levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct A3dpScore {
    pub mean: f64,
    pub c_l: f64,
    pub c_s: f64,
}

/// Average precision for 3D pose. A prediction is a true positive at level
/// `j` iff its translation, rotation, and shape errors against some truth
/// all pass that level's thresholds; matching is greedy in descending
/// score, each truth claimed once (nearest-translation tie-break), and AP
/// per level uses the same interpolated PR area as [`average_precision`].
pub fn a3dp(images: &[PoseEvalImage], cfg: &A3dpConfig) -> Result<A3dpScore, MetricsError> {
    let mut index = 0;
    for img in images {
        for p in &img.predictions {
            if !p.score.is_finite() {
                return Err(MetricsError::MissingScores { index });
            }
            index += 1;
        }
    }

    let level_ap = |&(t_thresh, r_thresh, s_thresh): &(f64, f64, f64)| -> f64 {
        let mut labels = Vec::new();
        let mut total_gt = 0usize;
        for img in images {
            total_gt += img.truths.len();
            let mut order: Vec<usize> = (0..img.predictions.len()).collect();
            order.sort_by(|&a, &b| {
                img.predictions[b].score.total_cmp(&img.predictions[a].score)
            });
            let mut taken = vec![false; img.truths.len()];
            for &p in &order {
                let pred = &img.predictions[p];
                let mut best: Option<(f64, usize)> = None;
                for (g, gt) in img.truths.iter().enumerate() {
                    if taken[g] {
                        continue;
                    }
                    let trans = pred.pose.translation_distance_to(&gt.pose);
                    let rot = pred.pose.rotation_angle_to(&gt.pose);
                    let sim = pred
                        .dimensions
                        .as_ref()
                        .map_or(1.0, |d| shape_similarity(d, &gt.dimensions));
                    let allowed = match cfg.mode {
                        A3dpMode::Abs => t_thresh,
                        A3dpMode::Rel => t_thresh * gt.pose.translation.norm(),
                    };
                    if trans <= allowed
                        && rot <= r_thresh
                        && sim >= s_thresh
                        && best.map_or(true, |(bt, _)| trans < bt)
                    {
                        best = Some((trans, g));
                    }
                }
                if let Some((_, g)) = best {
                    taken[g] = true;
                    labels.push((pred.score, true));
                } else {
                    labels.push((pred.score, false));
                }
            }
        }
        labels.sort_by(|a, b| b.0.total_cmp(&a.0));
        ap_from_labels(&labels, total_gt)
    };

    let aps: Vec<f64> = cfg.levels.iter().map(level_ap).collect();
    Ok(A3dpScore {
        mean: aps.iter().sum::<f64>() / aps.len() as f64,
        c_l: aps[cfg.loose_index],
        c_s: aps[cfg.strict_index],
    })
}
