//! Evaluation: detection metrics, region matching, grid encoding, the
//! regularization search and report tables.

pub mod grid;
pub mod matching;
pub mod metrics;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{GroundTruth, WeakImageSet};
use crate::embeddings::{AnchorDetections, Detection};
use crate::error::Result;
use crate::geometry::Region;
use crate::mil::{train_part, MilConfig, PartModel};

pub use grid::{grid_encode, grid_pool};
pub use matching::{match_benchmark, match_regions, MatchReport, MatchSettings, MatchVariant};
pub use metrics::{average_precision, corloc, DEFAULT_IOU_THRESHOLD};

/// Regularization values tried by [`lambda_search`].
pub const LAMBDA_GRID: [f64; 3] = [1e-4, 1e-3, 1e-2];

/// Ranked detections of a part model on every listed image. The result is
/// indexed by store image, with empty lists for unlisted images.
pub fn detect_images(
    model: &PartModel,
    data: &WeakImageSet<'_>,
    images: &[usize],
    anchors: Option<&AnchorDetections>,
    top_n: usize,
    nms_iou: f64,
) -> Result<Vec<Vec<Detection>>> {
    let store = data.store;
    let found: Vec<(usize, Vec<Detection>)> = images
        .par_iter()
        .map(|&i| {
            let d = anchors.map(|a| a.image(i)).transpose()?;
            model.detect(store, i, d, top_n, nms_iou).map(|v| (i, v))
        })
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::new(); store.len()];
    for (i, v) in found {
        out[i] = v;
    }
    Ok(out)
}

/// Top-scoring box of the model on every positive image of `data`.
pub fn top1_regions(
    model: &PartModel,
    data: &WeakImageSet<'_>,
    anchors: Option<&AnchorDetections>,
) -> Result<Vec<(usize, Option<Region>)>> {
    let positives: Vec<usize> = data.positives().collect();
    let dets = detect_images(model, data, &positives, anchors, 1, 0.0)?;
    Ok(positives
        .into_iter()
        .map(|i| (i, dets[i].first().map(|d| d.region)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartScore {
    pub concept: String,
    pub variant: String,
    pub ap: Option<f64>,
    pub corloc: Option<f64>,
}

/// AP over all images of `data` and CorLoc over its positives. Metrics that
/// are undefined for this data are reported as `None`.
pub fn evaluate_part(
    model: &PartModel,
    data: &WeakImageSet<'_>,
    gt: &GroundTruth,
    anchors: Option<&AnchorDetections>,
    iou_thresh: f64,
) -> Result<PartScore> {
    let images: Vec<usize> = data.items.iter().map(|i| i.image).collect();
    let dets = detect_images(model, data, &images, anchors, 5, 0.3)?;
    let ap = defined(average_precision(&dets, gt, &model.concept, iou_thresh))?;
    let top = top1_regions(model, data, anchors)?;
    let cl = defined(corloc(&top, gt, &model.concept, iou_thresh))?;
    Ok(PartScore {
        concept: model.concept.clone(),
        variant: model.variant().name().to_string(),
        ap,
        corloc: cl,
    })
}

fn defined(v: Result<f64>) -> Result<Option<f64>> {
    match v {
        Ok(x) => Ok(Some(x)),
        Err(crate::Error::Undefined(msg)) => {
            log::warn!("{msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub lambda: f64,
    /// `(lambda, validation CorLoc)` for every grid value.
    pub scores: Vec<(f64, f64)>,
}

/// Picks the regularization weight with the best validation CorLoc; ties go
/// to the earlier grid value.
pub fn lambda_search(
    concept: &str,
    train: &WeakImageSet<'_>,
    validation: &WeakImageSet<'_>,
    gt: &GroundTruth,
    anchors: Option<&AnchorDetections>,
    cfg: &MilConfig,
    grid: &[f64],
) -> Result<LambdaSearch> {
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let model = train_part(concept, train, anchors, None, &MilConfig { lambda, ..*cfg })?;
        let top = top1_regions(&model, validation, anchors)?;
        scores.push((lambda, corloc(&top, gt, concept, DEFAULT_IOU_THRESHOLD)?));
    }
    let best = scores
        .iter()
        .fold(None::<(f64, f64)>, |acc, &(l, s)| match acc {
            Some((_, b)) if s <= b => acc,
            _ => Some((l, s)),
        })
        .map_or(cfg.lambda, |(l, _)| l);
    Ok(LambdaSearch {
        lambda: best,
        scores,
    })
}

/// Per-part metrics of one or more models.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub parts: Vec<PartScore>,
}

impl EvalReport {
    fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
        let v: Vec<f64> = values.flatten().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean AP of one variant over its parts.
    pub fn mean_ap(&self, variant: &str) -> Option<f64> {
        Self::mean(self.parts.iter().filter(|p| p.variant == variant).map(|p| p.ap))
    }

    /// Mean of per-part CorLoc of one variant.
    pub fn mean_corloc(&self, variant: &str) -> Option<f64> {
        Self::mean(self.parts.iter().filter(|p| p.variant == variant).map(|p| p.corloc))
    }

    /// Plain-text table: one row per variant, one AP column per part, then
    /// mean AP and mean CorLoc.
    pub fn to_table(&self) -> String {
        let mut concepts: Vec<&str> = Vec::new();
        let mut variants: Vec<&str> = Vec::new();
        for p in &self.parts {
            if !concepts.contains(&p.concept.as_str()) {
                concepts.push(&p.concept);
            }
            if !variants.contains(&p.variant.as_str()) {
                variants.push(&p.variant);
            }
        }
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
        let mut out = String::new();
        let _ = write!(out, "{:<8}", "method");
        for c in &concepts {
            let _ = write!(out, " {c:>10}");
        }
        let _ = writeln!(out, " {:>8} {:>8}", "mAP", "CorLoc");
        for v in &variants {
            let _ = write!(out, "{v:<8}");
            for c in &concepts {
                let ap = self
                    .parts
                    .iter()
                    .find(|p| p.variant == *v && p.concept == *c)
                    .and_then(|p| p.ap);
                let _ = write!(out, " {:>10}", cell(ap));
            }
            let _ = writeln!(
                out,
                " {:>8} {:>8}",
                cell(self.mean_ap(v)),
                cell(self.mean_corloc(v))
            );
        }
        out
    }
}
