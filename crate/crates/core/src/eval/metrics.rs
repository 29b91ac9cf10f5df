//! Detection metrics: VOC-style average precision and CorLoc.

use serde::{Deserialize, Serialize};

use crate::dataset::GroundTruth;
use crate::embeddings::Detection;
use crate::error::{Error, Result};
use crate::geometry::{iou, Region};

/// IoU at which a detection counts as correct.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.4;

/// Outcome of one detection after greedy matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    /// Matched only a difficult or truncated box.
    Ignored,
}

/// Precision-recall trace of a ranked detection list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub positives: usize,
}

/// Pools the detections of all images (index = ground-truth image index),
/// sorts them by descending score and matches them greedily.
///
/// A detection is a true positive when its best-overlapping unmatched,
/// non-ignored box of `concept` reaches `iou_thresh`. Otherwise it is
/// ignored if it reaches an ignored box, and a false positive else.
pub fn match_detections(
    dets: &[Vec<Detection>],
    gt: &GroundTruth,
    concept: &str,
    iou_thresh: f64,
) -> Result<(Vec<Outcome>, usize)> {
    gt.check_concept(concept)?;
    let mut pooled: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, list)| (0..list.len()).map(move |r| (i, r)))
        .collect();
    pooled.sort_by(|a, b| dets[b.0][b.1].score.total_cmp(&dets[a.0][a.1].score));

    let positives = (0..gt.images.len())
        .map(|i| gt.boxes(i, concept).filter(|b| !b.ignored()).count())
        .sum();
    let mut used: Vec<Vec<bool>> = gt.images.iter().map(|b| vec![false; b.len()]).collect();
    let mut outcomes = Vec::with_capacity(pooled.len());
    for (img, rank) in pooled {
        let det = &dets[img][rank].region;
        let boxes = gt.images.get(img).map(Vec::as_slice).unwrap_or(&[]);
        let mut best: Option<(usize, f64)> = None;
        let mut hits_ignored = false;
        for (j, b) in boxes.iter().enumerate() {
            if b.concept != concept {
                continue;
            }
            let o = iou(det, &b.region);
            if b.ignored() {
                hits_ignored |= o >= iou_thresh;
            } else if !used[img][j] && best.map_or(true, |(_, v)| o > v) {
                best = Some((j, o));
            }
        }
        let outcome = match best {
            Some((j, o)) if o >= iou_thresh => {
                used[img][j] = true;
                Outcome::TruePositive
            }
            _ if hits_ignored => Outcome::Ignored,
            _ => Outcome::FalsePositive,
        };
        outcomes.push(outcome);
    }
    Ok((outcomes, positives))
}

/// Precision and recall after each counted (non-ignored) detection.
pub fn pr_curve(
    dets: &[Vec<Detection>],
    gt: &GroundTruth,
    concept: &str,
    iou_thresh: f64,
) -> Result<PrCurve> {
    let (outcomes, positives) = match_detections(dets, gt, concept, iou_thresh)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    for o in outcomes {
        match o {
            Outcome::TruePositive => tp += 1,
            Outcome::FalsePositive => fp += 1,
            Outcome::Ignored => continue,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(if positives > 0 {
            tp as f64 / positives as f64
        } else {
            0.0
        });
    }
    Ok(PrCurve {
        precision,
        recall,
        positives,
    })
}

/// All-point interpolated average precision.
///
/// Each true positive raises recall by `1 / P`; its contribution is the
/// best precision reached at that recall or later. Summing the steps before
/// dividing keeps a perfect ranking at exactly 1.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gt: &GroundTruth,
    concept: &str,
    iou_thresh: f64,
) -> Result<f64> {
    let (outcomes, positives) = match_detections(dets, gt, concept, iou_thresh)?;
    if positives == 0 {
        return Err(Error::Undefined(format!(
            "no ground-truth boxes of `{concept}`"
        )));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points: Vec<(bool, f64)> = Vec::new();
    for o in outcomes {
        match o {
            Outcome::TruePositive => tp += 1,
            Outcome::FalsePositive => fp += 1,
            Outcome::Ignored => continue,
        }
        points.push((o == Outcome::TruePositive, tp as f64 / (tp + fp) as f64));
    }
    let mut best = 0.0f64;
    let mut sum = 0.0;
    for &(hit, p) in points.iter().rev() {
        best = best.max(p);
        if hit {
            sum += best;
        }
    }
    Ok(sum / positives as f64)
}

/// Fraction of positive images whose top detection overlaps any box of
/// `concept` at `iou_thresh` or more. `top1` pairs a ground-truth image
/// index with its top region (or `None` when nothing was detected).
pub fn corloc(
    top1: &[(usize, Option<Region>)],
    gt: &GroundTruth,
    concept: &str,
    iou_thresh: f64,
) -> Result<f64> {
    gt.check_concept(concept)?;
    if top1.is_empty() {
        return Err(Error::Undefined(format!(
            "CorLoc of `{concept}` over zero positive images"
        )));
    }
    let hits = top1
        .iter()
        .filter(|(img, r)| {
            r.is_some_and(|r| gt.boxes(*img, concept).any(|b| iou(&r, &b.region) >= iou_thresh))
        })
        .count();
    Ok(hits as f64 / top1.len() as f64)
}
