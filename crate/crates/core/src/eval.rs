//! Detection evaluation: keypoint boxes, IoU matching, AP, F1 and the
//! prediction-to-ground-truth distance histogram.
//!
//! Every keypoint is scored through a 21×21 box centred on it. Boxes use the
//! inclusive pixel convention, so a box spanning `[x-10, x+10]` is 21 pixels
//! wide and has area 441.
//!
//! AP is the area under the all-point interpolated precision/recall curve:
//! detections from every slice are ranked by score, one PR point is taken
//! after each distinct score, precision is replaced by its running maximum
//! from the right, and the resulting step function is integrated over
//! recall. Tied scores enter the curve together, so the result does not
//! depend on how ties are ordered.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::Condition;
use crate::error::{Error, Result};
use crate::heatmap::Detection;

pub const BOX_HALF_SIZE: f64 = 10.0;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.75;
pub const HISTOGRAM_BIN_WIDTH: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn width(&self) -> f64 {
        (self.x1 - self.x0 + 1.0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0 + 1.0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x1.min(other.x1) - self.x0.max(other.x0) + 1.0).max(0.0);
        let ih = (self.y1.min(other.y1) - self.y0.max(other.y0) + 1.0).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// The 21×21 evaluation box around a keypoint.
pub fn keypoint_to_box(point: (f64, f64)) -> BBox {
    let (x, y) = point;
    BBox {
        x0: x - BOX_HALF_SIZE,
        y0: y - BOX_HALF_SIZE,
        x1: x + BOX_HALF_SIZE,
        y1: y + BOX_HALF_SIZE,
    }
}

/// Result of matching one slice's predictions against its ground truth.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchOutcome {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(prediction index, gt index, iou)` for every true positive.
    pub matches: Vec<(usize, usize, f64)>,
    /// Per prediction (input order): did it match a ground truth?
    pub pred_is_tp: Vec<bool>,
}

/// Indices of `preds` by descending score, ties broken by lower index.
fn score_order(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    order
}

/// Greedy matching: predictions are visited best-first and each takes the
/// unmatched ground truth with the highest IoU, if that IoU reaches the
/// threshold.
pub fn match_predictions(preds: &[Detection], gts: &[(f64, f64)], iou_threshold: f64) -> Result<MatchOutcome> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "IoU threshold must lie in (0, 1], got {iou_threshold}"
        )));
    }
    let gt_boxes: Vec<BBox> = gts.iter().map(|&g| keypoint_to_box(g)).collect();
    let mut gt_taken = vec![false; gts.len()];
    let mut out = MatchOutcome {
        pred_is_tp: vec![false; preds.len()],
        ..Default::default()
    };
    for pi in score_order(preds) {
        let pb = keypoint_to_box((preds[pi].x, preds[pi].y));
        let mut best: Option<(usize, f64)> = None;
        for (gi, gb) in gt_boxes.iter().enumerate() {
            if gt_taken[gi] {
                continue;
            }
            let iou = pb.iou(gb);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) if iou >= iou_threshold => {
                gt_taken[gi] = true;
                out.pred_is_tp[pi] = true;
                out.matches.push((pi, gi, iou));
                out.tp += 1;
            }
            _ => out.fp += 1,
        }
    }
    out.fn_ = gts.len() - out.tp;
    Ok(out)
}

pub fn precision(tp: usize, fp: usize) -> f64 {
    if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

pub fn recall(tp: usize, fn_: usize) -> f64 {
    if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    }
}

/// Harmonic mean of precision and recall; 0 when either is undefined or zero.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    let (p, r) = (precision(tp, fp), recall(tp, fn_));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// One point of a precision/recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Raw PR curve: one point per distinct score, best score first.
pub fn pr_curve(scored: &[(f64, bool)], num_gt: usize) -> Result<Vec<PrPoint>> {
    if num_gt == 0 {
        return Err(Error::InvalidData("AP is undefined without ground truth".into()));
    }
    if let Some((s, _)) = scored.iter().find(|(s, _)| !s.is_finite()) {
        return Err(Error::NonFinite(format!("detection score {s}")));
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold: s,
            recall: tp as f64 / num_gt as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    Ok(points)
}

/// All-point interpolated average precision over `(score, is_true_positive)`
/// pairs pooled across the dataset. Errors when `num_gt == 0`.
pub fn average_precision(scored: &[(f64, bool)], num_gt: usize) -> Result<f64> {
    let points = pr_curve(scored, num_gt)?;
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, &prec) in points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * prec;
        prev_recall = p.recall;
    }
    Ok(ap)
}

/// Pairs every prediction with its nearest still-unpaired ground truth,
/// best score first, with no IoU gate. Returns Euclidean distances.
///
/// With one ground truth per slice this is the distance from the top-1
/// prediction to the target.
pub fn distance_pairs(preds: &[Detection], gts: &[(f64, f64)]) -> Vec<f64> {
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::new();
    for pi in score_order(preds) {
        let p = preds[pi];
        let nearest = gts
            .iter()
            .enumerate()
            .filter(|(gi, _)| !taken[*gi])
            .map(|(gi, g)| (gi, (p.x - g.0).hypot(p.y - g.1)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((gi, d)) = nearest {
            taken[gi] = true;
            out.push(d);
        }
    }
    out
}

/// Counts per distance bin `[i·w, (i+1)·w)`, starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceHistogram {
    pub bin_width: f64,
    pub counts: Vec<usize>,
}

impl DistanceHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Fraction of pairs in the bins that end at or below `limit`.
    pub fn fraction_below(&self, limit: f64) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let bins = (limit / self.bin_width).floor() as usize;
        self.counts.iter().take(bins).sum::<usize>() as f64 / total as f64
    }

    /// `(bin start, bin end, count)` rows.
    pub fn bins(&self) -> Vec<(f64, f64, usize)> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (i as f64 * self.bin_width, (i + 1) as f64 * self.bin_width, c))
            .collect()
    }
}

pub fn distance_histogram(distances: &[f64], bin_width: f64) -> DistanceHistogram {
    let mut counts = Vec::new();
    for &d in distances.iter().filter(|d| d.is_finite() && **d >= 0.0) {
        let bin = (d / bin_width).floor() as usize;
        if counts.len() <= bin {
            counts.resize(bin + 1, 0);
        }
        counts[bin] += 1;
    }
    DistanceHistogram { bin_width, counts }
}

/// Predictions and ground truth for one evaluated slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub patient: String,
    pub slice: usize,
    pub condition: Condition,
    pub predictions: Vec<Detection>,
    pub ground_truth: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap75: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Score cut-off applied before counting TP/FP/FN for precision, recall and F1.
    pub score_threshold: f64,
    pub histogram: DistanceHistogram,
    pub pr_curve: Vec<PrPoint>,
    pub frames: usize,
}

impl EvalResult {
    /// Fraction of distance pairs closer than 10 px.
    pub fn within_10px(&self) -> f64 {
        self.histogram.fraction_below(10.0)
    }
}

/// Runs the full protocol over a set of frames.
///
/// AP uses every prediction. Precision, recall and F1 count only predictions
/// scoring at least `score_threshold`.
pub fn evaluate(frames: &[Frame], iou_threshold: f64, score_threshold: f64) -> Result<EvalResult> {
    let mut scored = Vec::new();
    let mut distances = Vec::new();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut num_gt = 0;
    for f in frames {
        num_gt += f.ground_truth.len();
        let m = match_predictions(&f.predictions, &f.ground_truth, iou_threshold)?;
        scored.extend(f.predictions.iter().zip(&m.pred_is_tp).map(|(p, &t)| (p.score, t)));

        let kept: Vec<Detection> = f
            .predictions
            .iter()
            .copied()
            .filter(|p| p.score >= score_threshold)
            .collect();
        let mk = match_predictions(&kept, &f.ground_truth, iou_threshold)?;
        tp += mk.tp;
        fp += mk.fp;
        fn_ += mk.fn_;
        distances.extend(distance_pairs(&kept, &f.ground_truth));
    }
    let (ap75, pr) = if num_gt == 0 {
        (0.0, Vec::new())
    } else {
        (average_precision(&scored, num_gt)?, pr_curve(&scored, num_gt)?)
    };
    Ok(EvalResult {
        ap75,
        precision: precision(tp, fp),
        recall: recall(tp, fn_),
        f1: f1_score(tp, fp, fn_),
        tp,
        fp,
        fn_,
        score_threshold,
        histogram: distance_histogram(&distances, HISTOGRAM_BIN_WIDTH),
        pr_curve: pr,
        frames: frames.len(),
    })
}

/// One row of a prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub patient: String,
    pub slice: usize,
    pub condition: Condition,
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a CSV prediction dump (header `patient,slice,condition,x,y,score`).
pub fn parse_predictions<R: std::io::Read>(reader: R) -> Result<Vec<PredictionRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: PredictionRecord = row?;
        if !(r.x.is_finite() && r.y.is_finite() && r.score.is_finite()) {
            return Err(Error::NonFinite(format!("prediction row {r:?}")));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(f)
}

/// Groups prediction rows by `(patient, slice, condition)`.
pub fn group_predictions(
    records: &[PredictionRecord],
) -> BTreeMap<(String, usize, Condition), Vec<Detection>> {
    let mut map: BTreeMap<_, Vec<Detection>> = BTreeMap::new();
    for r in records {
        map.entry((r.patient.clone(), r.slice, r.condition))
            .or_default()
            .push(Detection {
                x: r.x,
                y: r.y,
                score: r.score,
            });
    }
    map
}
