//! Localization and classification metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cam::{BBox, Interval};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const BOX_IOU_THRESHOLD: f64 = 0.5;

pub fn iou_box(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn iou_interval(a: &Interval, b: &Interval) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.len() + b.len() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// How an IoU is compared against a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouCriterion {
    /// `iou > threshold`
    Strict,
    /// `iou >= threshold`
    #[default]
    Inclusive,
}

impl IouCriterion {
    pub fn passes(self, iou: f64, threshold: f64) -> bool {
        match self {
            IouCriterion::Strict => iou > threshold,
            IouCriterion::Inclusive => iou >= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub input_id: u64,
    pub true_class: usize,
    pub probabilities: Vec<f64>,
    /// Box from the ground-truth class CAM; `None` = no localization.
    pub gt_class_box: Option<BBox>,
    /// Box from the top-predicted class CAM.
    pub top1_box: Option<BBox>,
    pub gt_boxes: Vec<BBox>,
}

impl ImageRecord {
    /// Highest-probability class; ties go to the lower index.
    pub fn predicted_class(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probabilities.iter().enumerate() {
            if p > self.probabilities[best] {
                best = i;
            }
        }
        best
    }

    fn box_hits(&self, b: Option<&BBox>) -> bool {
        b.is_some_and(|b| {
            self.gt_boxes
                .iter()
                .any(|g| IouCriterion::Strict.passes(iou_box(b, g), BOX_IOU_THRESHOLD))
        })
    }

    pub fn gt_known_hit(&self) -> bool {
        self.box_hits(self.gt_class_box.as_ref())
    }

    pub fn top1_correct(&self) -> bool {
        self.predicted_class() == self.true_class
    }

    /// A misclassified record is a failure whatever its box.
    pub fn top1_loc_hit(&self) -> bool {
        self.top1_correct() && self.box_hits(self.top1_box.as_ref())
    }

    fn validate(&self) -> Result<()> {
        if self.gt_boxes.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "record {} has no ground-truth box",
                self.input_id
            )));
        }
        let s: f64 = self.probabilities.iter().sum();
        if self.probabilities.is_empty() || (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "record {} probabilities sum to {s}",
                self.input_id
            )));
        }
        if self.true_class >= self.probabilities.len() {
            return Err(Error::InvalidArgument(format!(
                "record {} class {} out of range",
                self.input_id, self.true_class
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub gt_known_loc: f64,
    pub top1_loc: f64,
    pub top1_clas: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageReport {
    pub overall: ImageMetrics,
    pub per_class: BTreeMap<usize, ImageMetrics>,
}

fn tally<'a>(records: impl Iterator<Item = &'a ImageRecord>) -> ImageMetrics {
    let mut m = ImageMetrics::default();
    for r in records {
        m.count += 1;
        m.gt_known_loc += r.gt_known_hit() as u8 as f64;
        m.top1_loc += r.top1_loc_hit() as u8 as f64;
        m.top1_clas += r.top1_correct() as u8 as f64;
    }
    if m.count > 0 {
        let n = m.count as f64;
        m.gt_known_loc /= n;
        m.top1_loc /= n;
        m.top1_clas /= n;
    }
    m
}

/// Fractions in [0, 1].
pub fn image_metrics(records: &[ImageRecord]) -> Result<ImageReport> {
    if records.is_empty() {
        return Err(Error::Empty("image_metrics needs at least one record".into()));
    }
    for r in records {
        r.validate()?;
    }
    let mut classes: Vec<usize> = records.iter().map(|r| r.true_class).collect();
    classes.sort_unstable();
    classes.dedup();
    let per_class = classes
        .into_iter()
        .map(|c| (c, tally(records.iter().filter(|r| r.true_class == c))))
        .collect();
    Ok(ImageReport {
        overall: tally(records.iter()),
        per_class,
    })
}

/// A scored detection in one video.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: u64,
    pub interval: Interval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub video_id: u64,
    pub interval: Interval,
}

/// Per-detection outcome of greedy matching, in ranked order.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], theta: f64, crit: IouCriterion) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&dets[a], &dets[b]);
        db.interval
            .score
            .total_cmp(&da.interval.score)
            .then(da.video_id.cmp(&db.video_id))
            .then(da.interval.start.total_cmp(&db.interval.start))
            .then(da.interval.end.total_cmp(&db.interval.end))
    });
    let mut used = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.video_id != d.video_id {
                    continue;
                }
                let iou = iou_interval(&d.interval, &g.interval);
                if crit.passes(iou, theta) && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the precision/recall curve of a ranked hit list, using the
/// monotone precision envelope (all-point interpolation).
pub fn ap_from_hits(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || hits.is_empty() {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// AP for one class over a set of videos.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], theta: f64, crit: IouCriterion) -> f64 {
    ap_from_hits(&match_detections(dets, gts, theta, crit), gts.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalRecord {
    pub video_id: u64,
    pub class: usize,
    pub predictions: Vec<Interval>,
    pub ground_truth: Vec<Interval>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TemporalReport {
    pub thresholds: Vec<f64>,
    /// mAP in percent, one per threshold.
    pub map: Vec<f64>,
    /// Per-class AP in percent, one per threshold.
    pub per_class: BTreeMap<usize, Vec<f64>>,
    pub skipped_classes: Vec<usize>,
}

impl TemporalReport {
    pub fn map_at(&self, theta: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - theta).abs() < 1e-12)
            .map(|i| self.map[i])
    }
}

/// Predictions of a video are scored against the video's own class (the
/// class label is assumed known). Classes without ground truth are skipped.
pub fn temporal_map(records: &[TemporalRecord], thresholds: &[f64], crit: IouCriterion) -> Result<TemporalReport> {
    if records.is_empty() {
        return Err(Error::Empty("temporal_map needs at least one record".into()));
    }
    let mut by_class: BTreeMap<usize, (Vec<Detection>, Vec<GroundTruth>)> = BTreeMap::new();
    for r in records {
        let (d, g) = by_class.entry(r.class).or_default();
        d.extend(r.predictions.iter().map(|&interval| Detection {
            video_id: r.video_id,
            interval,
        }));
        g.extend(r.ground_truth.iter().map(|&interval| GroundTruth {
            video_id: r.video_id,
            interval,
        }));
    }
    let mut report = TemporalReport {
        thresholds: thresholds.to_vec(),
        ..Default::default()
    };
    for (class, (dets, gts)) in &by_class {
        if gts.is_empty() {
            log::warn!("class {class} has no ground truth; skipped");
            report.skipped_classes.push(*class);
            continue;
        }
        let aps = thresholds
            .iter()
            .map(|&t| 100.0 * average_precision(dets, gts, t, crit))
            .collect();
        report.per_class.insert(*class, aps);
    }
    if report.per_class.is_empty() {
        return Err(Error::Empty("no class has ground truth".into()));
    }
    let n = report.per_class.len() as f64;
    report.map = (0..thresholds.len())
        .map(|i| report.per_class.values().map(|v| v[i]).sum::<f64>() / n)
        .collect();
    Ok(report)
}
