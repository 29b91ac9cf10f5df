//! Cross-image region matching by embedding inner products.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DescriptorStore, GroundTruth};
use crate::embeddings::{geometric_embed, joint_embed, AnchorDetections, ImageDetections};
use crate::error::{Error, Result};
use crate::geometry::{iou, OverlapConfig, Region};
use crate::linalg::{argmax, dot, normalized, Matrix};

/// Which region descriptor the matcher compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatchVariant {
    /// Appearance times anchor geometry.
    #[serde(rename = "anchor-ag")]
    AnchorAg,
    /// Anchor geometry only.
    #[serde(rename = "anchor-g")]
    AnchorG,
    /// Appearance only.
    #[serde(rename = "a")]
    Appearance,
}

impl MatchVariant {
    pub const ALL: [MatchVariant; 3] = [Self::AnchorAg, Self::AnchorG, Self::Appearance];

    pub fn name(self) -> &'static str {
        match self {
            Self::AnchorAg => "anchor-ag",
            Self::AnchorG => "anchor-g",
            Self::Appearance => "a",
        }
    }
}

impl fmt::Display for MatchVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MatchVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown match variant `{s}`")))
    }
}

/// Matching descriptor of one region.
pub fn match_vector(
    store: &DescriptorStore,
    image: usize,
    proposal: usize,
    dets: Option<&ImageDetections>,
    variant: MatchVariant,
    overlap: &OverlapConfig,
    normalize: bool,
) -> Result<Vec<f64>> {
    let entry = store.image(image);
    let a = entry.descriptors.row_f64(proposal);
    let v = match variant {
        MatchVariant::Appearance => a,
        MatchVariant::AnchorG | MatchVariant::AnchorAg => {
            let dets = dets.ok_or_else(|| {
                Error::Config(format!("match variant {variant} needs anchor detections"))
            })?;
            let g = geometric_embed(&entry.proposals[proposal], dets, overlap);
            if variant == MatchVariant::AnchorG {
                g
            } else {
                joint_embed(&a, &g)?
            }
        }
    };
    Ok(if normalize { normalized(&v) } else { v })
}

/// Matching descriptors of every proposal of an image.
pub fn match_matrix(
    store: &DescriptorStore,
    image: usize,
    dets: Option<&ImageDetections>,
    variant: MatchVariant,
    overlap: &OverlapConfig,
    normalize: bool,
) -> Result<Matrix> {
    let n = store.image(image).proposals.len();
    let rows = (0..n)
        .map(|p| match_vector(store, image, p, dets, variant, overlap, normalize))
        .collect::<Result<Vec<_>>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    Ok(Matrix::from_rows(cols, rows))
}

/// Target row maximizing the inner product with `source`; ties to the
/// lowest index.
pub fn best_match(source: &[f64], target: &Matrix) -> Option<(usize, f64)> {
    argmax(target.iter_rows().map(|row| dot(row, source)))
}

/// Proposal of the source image closest to `region` (itself when it is a
/// proposal).
pub fn nearest_proposal(store: &DescriptorStore, image: usize, region: &Region) -> Result<usize> {
    let entry = store.image(image);
    if let Some(p) = entry.proposal_index(region) {
        return Ok(p);
    }
    argmax(entry.proposals.iter().map(|q| iou(q, region)))
        .map(|(p, _)| p)
        .ok_or_else(|| Error::InvalidInput(format!("image `{}` has no proposals", entry.id)))
}

/// Settings shared by every match query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchSettings {
    pub variant: MatchVariant,
    pub overlap: OverlapConfig,
    pub normalize: bool,
}

impl Default for MatchSettings {
    fn default() -> Self {
        Self {
            variant: MatchVariant::AnchorAg,
            overlap: OverlapConfig::default(),
            normalize: true,
        }
    }
}

/// Best target proposal for the source region `(source, region)`.
pub fn match_regions(
    store: &DescriptorStore,
    dets: Option<&AnchorDetections>,
    source: usize,
    region: &Region,
    target: usize,
    settings: &MatchSettings,
) -> Result<Region> {
    let d = |i: usize| dets.map(|a| a.image(i)).transpose();
    let p = nearest_proposal(store, source, region)?;
    let v = match_vector(
        store,
        source,
        p,
        d(source)?,
        settings.variant,
        &settings.overlap,
        settings.normalize,
    )?;
    let m = match_matrix(
        store,
        target,
        d(target)?,
        settings.variant,
        &settings.overlap,
        settings.normalize,
    )?;
    let (q, _) = best_match(&v, &m)
        .ok_or_else(|| Error::InvalidInput(format!("image {target} has no proposals")))?;
    Ok(store.image(target).proposals[q])
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConceptMatch {
    pub mean_iou: f64,
    pub matched: usize,
    /// Source parts whose concept is absent from the target image.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchReport {
    pub variant: Option<MatchVariant>,
    pub per_concept: BTreeMap<String, ConceptMatch>,
    /// Unweighted mean over concepts with at least one match.
    pub mean_iou: f64,
}

/// Matches every non-ignored source part of every pair and averages the IoU
/// of the prediction with the best-overlapping target part of the same
/// concept.
pub fn match_benchmark(
    store: &DescriptorStore,
    gt: &GroundTruth,
    dets: Option<&AnchorDetections>,
    pairs: &[(usize, usize)],
    settings: &MatchSettings,
) -> Result<MatchReport> {
    // Target matrices are reused across the parts of a pair.
    let per_pair: Vec<Vec<(String, Option<f64>)>> = pairs
        .par_iter()
        .map(|&(s, t)| {
            let d = |i: usize| dets.map(|a| a.image(i)).transpose();
            let target = match_matrix(
                store,
                t,
                d(t)?,
                settings.variant,
                &settings.overlap,
                settings.normalize,
            )?;
            let mut out = Vec::new();
            for part in gt.images.get(s).into_iter().flatten().filter(|b| !b.ignored()) {
                let targets: Vec<&Region> = gt
                    .boxes(t, &part.concept)
                    .filter(|b| !b.ignored())
                    .map(|b| &b.region)
                    .collect();
                if targets.is_empty() {
                    out.push((part.concept.clone(), None));
                    continue;
                }
                let p = nearest_proposal(store, s, &part.region)?;
                let v = match_vector(
                    store,
                    s,
                    p,
                    d(s)?,
                    settings.variant,
                    &settings.overlap,
                    settings.normalize,
                )?;
                let (q, _) = best_match(&v, &target).ok_or_else(|| {
                    Error::InvalidInput(format!("image {t} has no proposals"))
                })?;
                let predicted = store.image(t).proposals[q];
                let best = targets.iter().map(|g| iou(&predicted, g)).fold(0.0, f64::max);
                out.push((part.concept.clone(), Some(best)));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut sums: BTreeMap<String, (f64, usize, usize)> = BTreeMap::new();
    for (concept, value) in per_pair.into_iter().flatten() {
        let e = sums.entry(concept).or_default();
        match value {
            Some(v) => {
                e.0 += v;
                e.1 += 1;
            }
            None => e.2 += 1,
        }
    }
    let per_concept: BTreeMap<String, ConceptMatch> = sums
        .into_iter()
        .map(|(c, (sum, n, skipped))| {
            let mean_iou = if n > 0 { sum / n as f64 } else { 0.0 };
            (c, ConceptMatch { mean_iou, matched: n, skipped })
        })
        .collect();
    let scored: Vec<f64> = per_concept
        .values()
        .filter(|c| c.matched > 0)
        .map(|c| c.mean_iou)
        .collect();
    let mean_iou = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(MatchReport {
        variant: Some(settings.variant),
        per_concept,
        mean_iou,
    })
}
