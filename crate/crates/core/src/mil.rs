//! Multiple-instance part learning.
//!
//! Minimizes
//!
//! ```text
//! lambda/2 |w|^2 + 1/n sum_i max{0, 1 - y_i max_R <phi(x_i|R), w>}
//! ```
//!
//! by alternating a convex w-step over fixed positive selections with
//! relocalization, which re-selects the best-scoring proposal of every
//! positive image. Negative images always use their full max.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DescriptorStore, ImageEntry, WeakImageSet};
use crate::embeddings::{
    embed_image, AnchorDetections, Detection, EmbeddingConfig, EmbeddingTable, ImageDetections,
    Variant,
};
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::linalg::{argmax, dot, dot_f32, Matrix};
use crate::nms::greedy_nms;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MilConfig {
    pub embedding: EmbeddingConfig,
    pub lambda: f64,
    /// Rounds run with the appearance (and context) descriptor only.
    pub appearance_rounds: usize,
    /// Rounds run with the full descriptor of the variant.
    pub joint_rounds: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            embedding: EmbeddingConfig::default(),
            lambda: 1e-3,
            appearance_rounds: 5,
            joint_rounds: 5,
            epochs: 20,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

impl MilConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.embedding.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub phase: Variant,
    /// Objective under the selections made at the end of the round.
    pub objective: f64,
    /// Positive images whose selection moved in this round.
    pub changed: usize,
}

/// A trained part detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartModel {
    pub concept: String,
    pub config: MilConfig,
    pub w: Vec<f64>,
    /// Anchor count the geometric part was built with (0 without geometry).
    pub anchors: usize,
    #[serde(default)]
    pub log: Vec<RoundLog>,
    /// Final `(image, proposal)` selection of every positive training image.
    #[serde(default)]
    pub selections: Vec<(usize, usize)>,
}

impl PartModel {
    pub fn variant(&self) -> Variant {
        self.config.embedding.variant
    }

    /// Embeds every proposal of an image the way the model expects.
    pub fn embed_image(
        &self,
        store: &DescriptorStore,
        image: usize,
        dets: Option<&ImageDetections>,
    ) -> Result<Matrix> {
        let m = embed_image(store, image, dets, &self.config.embedding)?;
        if m.cols() != self.w.len() {
            return Err(Error::DimensionMismatch {
                record: format!("part model `{}`", self.concept),
                expected: self.w.len(),
                found: m.cols(),
            });
        }
        Ok(m)
    }

    /// Ranked, suppressed detections on one image.
    pub fn detect(
        &self,
        store: &DescriptorStore,
        image: usize,
        dets: Option<&ImageDetections>,
        top_n: usize,
        nms_iou: f64,
    ) -> Result<Vec<Detection>> {
        let m = self.embed_image(store, image, dets)?;
        Ok(detect_part(&self.w, &m, &store.image(image).proposals, top_n, nms_iou))
    }
}

/// The single strongly annotated example `(x_a, R_a)` and its weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSpec {
    pub image: String,
    #[serde(rename = "box")]
    pub region: crate::geometry::Region,
    pub beta: f64,
}

/// Appearance-similarity factor `exp(beta <phi_a(x|R), phi_a(x_a|R_a)>) / C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarFactor {
    reference: Vec<f64>,
    beta: f64,
}

impl ExemplarFactor {
    /// Resolves the annotated box to the proposal of `x_a` overlapping it
    /// most.
    pub fn new(spec: &ExemplarSpec, store: &DescriptorStore) -> Result<Self> {
        if !(spec.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", spec.beta)));
        }
        let entry = store.by_id(&spec.image)?;
        let (p, overlap) = argmax(entry.proposals.iter().map(|q| iou(q, &spec.region)))
            .ok_or_else(|| Error::InvalidInput(format!("image `{}` has no proposals", entry.id)))?;
        if overlap < 1.0 {
            log::warn!(
                "exemplar box {} matched to proposal {} at IoU {overlap:.3}",
                spec.region,
                entry.proposals[p]
            );
        }
        Ok(Self {
            reference: entry.descriptors.row_f64(p),
            beta: spec.beta,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Unnormalized factor of one proposal.
    pub fn raw(&self, entry: &ImageEntry, proposal: usize) -> f64 {
        (self.beta * dot_f32(entry.descriptors.row(proposal), &self.reference)).exp()
    }

    /// `C`: average unnormalized factor over the current positive selections.
    pub fn normalizer(&self, store: &DescriptorStore, selections: &[(usize, usize)]) -> f64 {
        if selections.is_empty() {
            return 1.0;
        }
        let sum: f64 = selections
            .iter()
            .map(|&(i, p)| self.raw(store.image(i), p))
            .sum();
        sum / selections.len() as f64
    }

    /// Normalized factor for every proposal of an image.
    pub fn factors(&self, entry: &ImageEntry, c: f64) -> Vec<f64> {
        (0..entry.proposals.len()).map(|p| self.raw(entry, p) / c).collect()
    }
}

fn scores<'a>(w: &'a [f64], rows: &'a Matrix) -> impl Iterator<Item = f64> + 'a {
    rows.iter_rows().map(move |r| dot(r, w))
}

/// Best proposal under `<phi, w>`, optionally multiplied by per-proposal
/// factors. Ties go to the lowest index; `None` without proposals.
pub fn relocalize(w: &[f64], embeddings: &Matrix, factors: Option<&[f64]>) -> Option<usize> {
    match factors {
        None => argmax(scores(w, embeddings)).map(|(p, _)| p),
        Some(f) => argmax(scores(w, embeddings).zip(f).map(|(s, f)| s * f)).map(|(p, _)| p),
    }
}

/// Top-`top_n` proposals by model score after greedy suppression at
/// `nms_iou`. Test-time scoring never involves an exemplar.
pub fn detect_part(
    w: &[f64],
    embeddings: &Matrix,
    proposals: &[crate::geometry::Region],
    top_n: usize,
    nms_iou: f64,
) -> Vec<Detection> {
    let s: Vec<f64> = scores(w, embeddings).collect();
    greedy_nms(proposals, &s, nms_iou, top_n)
        .into_iter()
        .map(|p| Detection {
            region: proposals[p],
            score: s[p],
        })
        .collect()
}

/// Positive-image selections for the MIL objective, indexed like
/// `WeakImageSet::items`. `None` means "use the full max".
pub type Selections = Vec<Option<usize>>;

/// MIL objective. Positives use their selection when one is given, every
/// other image its full max over proposals. Images without proposals are
/// skipped.
pub fn mil_objective(
    w: &[f64],
    lambda: f64,
    data: &WeakImageSet<'_>,
    table: &EmbeddingTable,
    selections: Option<&[Option<usize>]>,
) -> Result<f64> {
    if table.dim != w.len() {
        return Err(Error::DimensionMismatch {
            record: "mil weights".into(),
            expected: table.dim,
            found: w.len(),
        });
    }
    let mut loss = 0.0;
    let mut n = 0usize;
    for (idx, item) in data.items.iter().enumerate() {
        let rows = table.get(item.image)?;
        if rows.rows() == 0 {
            continue;
        }
        let chosen = selections
            .and_then(|s| s[idx])
            .filter(|_| item.label.is_positive());
        let s = match chosen {
            Some(p) => dot(rows.row(p), w),
            None => argmax(scores(w, rows)).map(|(_, v)| v).unwrap_or(0.0),
        };
        loss += (1.0 - item.label.sign() * s).max(0.0);
        n += 1;
    }
    Ok(0.5 * lambda * dot(w, w) + loss / n.max(1) as f64)
}

/// Index of the proposal covering the whole image, else the largest one.
pub fn initial_selection(entry: &ImageEntry) -> Option<usize> {
    let bounds = entry.bounds();
    entry
        .proposals
        .iter()
        .position(|p| p.contains(&bounds))
        .or_else(|| argmax(entry.proposals.iter().map(|p| p.area())).map(|(p, _)| p))
}

/// Averaged stochastic subgradient descent on the objective with fixed
/// selections, warm-started at `w0`. Returns whichever of the start, the
/// last iterate and the running average has the lowest objective, so the
/// step never increases it.
fn solve_w(
    w0: &[f64],
    cfg: &MilConfig,
    data: &WeakImageSet<'_>,
    table: &EmbeddingTable,
    selections: &[Option<usize>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let usable: Vec<usize> = (0..data.items.len())
        .filter(|&i| table.get(data.items[i].image).map_or(false, |m| m.rows() > 0))
        .collect();
    let mut w = w0.to_vec();
    let mut avg = vec![0.0; w.len()];
    let mut steps = 0.0;
    let mut order = usable.clone();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.learning_rate / (epoch as f64).sqrt();
        order.shuffle(rng);
        for &idx in &order {
            let item = data.items[idx];
            let rows = table.get(item.image)?;
            let p = match selections[idx].filter(|_| item.label.is_positive()) {
                Some(p) => p,
                None => argmax(scores(&w, rows)).expect("non-empty").0,
            };
            let x = rows.row(p);
            let y = item.label.sign();
            let margin = y * dot(x, &w);
            let shrink = 1.0 - lr * cfg.lambda;
            for v in w.iter_mut() {
                *v *= shrink;
            }
            if margin < 1.0 {
                for (v, xi) in w.iter_mut().zip(x) {
                    *v += lr * y * xi;
                }
            }
            steps += 1.0;
            for (a, v) in avg.iter_mut().zip(&w) {
                *a += (v - *a) / steps;
            }
        }
    }
    let mut best = w0.to_vec();
    let mut best_obj = mil_objective(&best, cfg.lambda, data, table, Some(selections))?;
    for cand in [w, avg] {
        let obj = mil_objective(&cand, cfg.lambda, data, table, Some(selections))?;
        if obj < best_obj {
            best = cand;
            best_obj = obj;
        }
    }
    Ok(best)
}

fn relocalize_all(
    w: &[f64],
    data: &WeakImageSet<'_>,
    table: &EmbeddingTable,
    exemplar: Option<&ExemplarFactor>,
    selections: &[Option<usize>],
) -> Result<Selections> {
    let store = data.store;
    let c = exemplar.map(|ex| {
        let current: Vec<(usize, usize)> = data
            .items
            .iter()
            .zip(selections)
            .filter(|(it, _)| it.label.is_positive())
            .filter_map(|(it, s)| s.map(|p| (it.image, p)))
            .collect();
        ex.normalizer(store, &current)
    });
    data.items
        .par_iter()
        .zip(selections.par_iter())
        .map(|(item, old)| {
            if !item.label.is_positive() {
                return Ok(*old);
            }
            let rows = table.get(item.image)?;
            let factors = exemplar.map(|ex| ex.factors(store.image(item.image), c.unwrap_or(1.0)));
            Ok(relocalize(w, rows, factors.as_deref()))
        })
        .collect()
}

/// Trains a part model with MIL.
///
/// Runs `appearance_rounds` with the appearance (and context) descriptor,
/// then `joint_rounds` with the full descriptor of the variant. Weights
/// restart from zero when the descriptor changes; selections carry over.
/// Variants without geometry run all rounds in a single phase.
pub fn train_part(
    concept: &str,
    data: &WeakImageSet<'_>,
    anchors: Option<&AnchorDetections>,
    exemplar: Option<&ExemplarSpec>,
    cfg: &MilConfig,
) -> Result<PartModel> {
    cfg.validate()?;
    let variant = cfg.embedding.variant;
    if variant.has_geometry() && anchors.is_none() {
        return Err(Error::Config(format!(
            "variant {variant} needs an anchor bank"
        )));
    }
    let store = data.store;
    let factor = exemplar.map(|e| ExemplarFactor::new(e, store)).transpose()?;
    let phases: Vec<(Variant, usize)> = if variant.has_geometry() {
        vec![
            (variant.appearance_part(), cfg.appearance_rounds),
            (variant, cfg.joint_rounds),
        ]
    } else {
        vec![(variant, cfg.appearance_rounds + cfg.joint_rounds)]
    };

    let images: Vec<usize> = data.items.iter().map(|i| i.image).collect();
    let mut selections: Selections = data
        .items
        .iter()
        .map(|it| {
            if it.label.is_positive() {
                initial_selection(store.image(it.image))
            } else {
                None
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut w = Vec::new();
    let mut round = 0;
    let mut k = 0;
    for (phase, rounds) in phases {
        let ecfg = cfg.embedding.with_variant(phase);
        let dets = if phase.has_geometry() { anchors } else { None };
        let table = EmbeddingTable::build(store, &images, dets, &ecfg)?;
        if phase.has_geometry() {
            k = anchors.and_then(|a| a.images.first()).map_or(0, |d| d.anchors());
        }
        w = vec![0.0; table.dim];
        for _ in 0..rounds {
            w = solve_w(&w, cfg, data, &table, &selections, &mut rng)?;
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite weights in round {round} of `{concept}`"
                )));
            }
            let next = relocalize_all(&w, data, &table, factor.as_ref(), &selections)?;
            let changed = next.iter().zip(&selections).filter(|(a, b)| a != b).count();
            selections = next;
            let objective = mil_objective(&w, cfg.lambda, data, &table, Some(&selections))?;
            log::debug!("{concept} round {round} [{phase}] objective {objective:.6} changed {changed}");
            log.push(RoundLog {
                round,
                phase,
                objective,
                changed,
            });
            round += 1;
        }
    }
    let chosen = data
        .items
        .iter()
        .zip(&selections)
        .filter(|(it, _)| it.label.is_positive())
        .filter_map(|(it, s)| s.map(|p| (it.image, p)))
        .collect();
    Ok(PartModel {
        concept: concept.to_string(),
        config: *cfg,
        w,
        anchors: k,
        log,
        selections: chosen,
    })
}
