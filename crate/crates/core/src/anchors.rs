//! Weakly supervised mid-level anchors.
//!
//! `K` linear detectors `w_k` over appearance descriptors are fitted to
//! image-level labels by minimizing
//!
//! ```text
//! sum_k [ lambda/2 |w_k|^2 - 1/n sum_i y_i [max_R <phi(x_i|R), w_k>]_+ ]
//!   + gamma sum_{k != q} <w_k/|w_k|, w_q/|w_q|>^2
//! ```
//!
//! with SGD and momentum, alternating positive and negative images. The
//! last term pushes the detectors towards mutual orthogonality; without it
//! they collapse onto the single most discriminative pattern.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DescriptorStore, WeakImageSet};
use crate::embeddings::{AnchorDetections, Detection, ImageDetections};
use crate::error::{Error, Result};
use crate::linalg::{argmax, dot, dot_f32, norm};
use crate::nms::greedy_nms;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorHyper {
    pub count: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub iterations: usize,
    /// Full objective is recorded every this many SGD steps.
    pub log_interval: usize,
    pub seed: u64,
}

impl Default for AnchorHyper {
    fn default() -> Self {
        Self {
            count: 150,
            lambda: 1e-4,
            gamma: 1.0,
            learning_rate: 0.01,
            momentum: 0.9,
            iterations: 40_000,
            log_interval: 1_000,
            seed: 0,
        }
    }
}

impl AnchorHyper {
    /// Small bank for desk-scale synthetic data: 8 anchors, 4000 steps and
    /// a regularizer strong enough to keep anchor scores near unit scale.
    pub fn desk(seed: u64) -> Self {
        Self {
            count: 8,
            lambda: 0.1,
            iterations: 4_000,
            log_interval: 500,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.count == 0 {
            return Err(Error::Config("anchor count must be positive".into()));
        }
        if self.gamma > 0.0 && self.count < 2 {
            return Err(Error::Config(
                "the orthogonality term needs at least two anchors".into(),
            ));
        }
        if self.lambda < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("lambda and gamma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSample {
    pub iteration: usize,
    pub objective: f64,
}

/// Learned anchor detectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorBank {
    pub hyper: AnchorHyper,
    pub weights: Vec<Vec<f64>>,
    #[serde(default)]
    pub log: Vec<ObjectiveSample>,
}

impl AnchorBank {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn objective(&self, data: &WeakImageSet<'_>) -> Result<ObjectiveValue> {
        anchor_objective(&self.weights, self.hyper.lambda, self.hyper.gamma, data)
    }

    /// Raw detector score of every proposal of `image` for anchor `k`.
    pub fn scores(&self, store: &DescriptorStore, image: usize, k: usize) -> Vec<f64> {
        let d = &store.image(image).descriptors;
        (0..d.rows())
            .map(|p| dot_f32(d.row(p), &self.weights[k]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    /// Images left out because they have no proposals.
    pub skipped: usize,
}

/// `sum_{k != q} <u_k, u_q>^2` over ordered pairs of unit directions.
pub fn orthogonality_penalty(weights: &[Vec<f64>]) -> f64 {
    let units = unit_vectors(weights);
    let mut total = 0.0;
    for k in 0..units.len() {
        for q in 0..units.len() {
            if k != q {
                let c = dot(&units[k].0, &units[q].0);
                total += c * c;
            }
        }
    }
    total
}

fn unit_vectors(weights: &[Vec<f64>]) -> Vec<(Vec<f64>, f64)> {
    weights
        .iter()
        .map(|w| {
            let n = norm(w);
            if n > 0.0 {
                (w.iter().map(|v| v / n).collect(), n)
            } else {
                (vec![0.0; w.len()], 0.0)
            }
        })
        .collect()
}

/// Best-scoring proposal of an image for a weight vector.
fn best_proposal(store: &DescriptorStore, image: usize, w: &[f64]) -> Option<(usize, f64)> {
    let d = &store.image(image).descriptors;
    argmax((0..d.rows()).map(|p| dot_f32(d.row(p), w)))
}

fn check_dims(weights: &[Vec<f64>], store: &DescriptorStore) -> Result<()> {
    for w in weights {
        if w.len() != store.dim() {
            return Err(Error::DimensionMismatch {
                record: "anchor weights".into(),
                expected: store.dim(),
                found: w.len(),
            });
        }
    }
    Ok(())
}

/// Exact anchor objective with the full max over proposals.
pub fn anchor_objective(
    weights: &[Vec<f64>],
    lambda: f64,
    gamma: f64,
    data: &WeakImageSet<'_>,
) -> Result<ObjectiveValue> {
    Ok(anchor_objective_and_gradient(weights, lambda, gamma, data)?.0)
}

/// Objective and its (sub)gradient with respect to every `w_k`.
///
/// The hinge subgradient at `[z]_+` with `z = 0` is taken as zero.
pub fn anchor_objective_and_gradient(
    weights: &[Vec<f64>],
    lambda: f64,
    gamma: f64,
    data: &WeakImageSet<'_>,
) -> Result<(ObjectiveValue, Vec<Vec<f64>>)> {
    check_dims(weights, data.store)?;
    let store = data.store;
    let used: Vec<_> = data
        .items
        .iter()
        .filter(|i| !store.image(i.image).proposals.is_empty())
        .collect();
    let skipped = data.items.len() - used.len();
    if skipped > 0 {
        log::warn!("anchor objective: skipped {skipped} image(s) without proposals");
    }
    let n = used.len().max(1) as f64;

    let mut value = 0.0;
    let mut grads: Vec<Vec<f64>> = weights.iter().map(|w| w.iter().map(|v| lambda * v).collect()).collect();
    for (w, g) in weights.iter().zip(grads.iter_mut()) {
        value += 0.5 * lambda * dot(w, w);
        for item in &used {
            let (p, m) = best_proposal(store, item.image, w).expect("non-empty proposals");
            if m > 0.0 {
                let y = item.label.sign();
                value -= y * m / n;
                let row = store.image(item.image).descriptors.row(p);
                for (gi, x) in g.iter_mut().zip(row) {
                    *gi -= y * f64::from(*x) / n;
                }
            }
        }
    }
    if gamma > 0.0 {
        value += gamma * orthogonality_penalty(weights);
        for (g, og) in grads.iter_mut().zip(orthogonality_gradient(weights, gamma)) {
            for (a, b) in g.iter_mut().zip(og) {
                *a += b;
            }
        }
    }
    Ok((ObjectiveValue { value, skipped }, grads))
}

/// Gradient of `gamma * sum_{k != q} <u_k, u_q>^2` including the Jacobian of
/// the normalization `w -> w / |w|`:
/// `d/dw_k = 4 gamma sum_q c_kq (u_q - c_kq u_k) / |w_k|`.
pub fn orthogonality_gradient(weights: &[Vec<f64>], gamma: f64) -> Vec<Vec<f64>> {
    let units = unit_vectors(weights);
    units
        .iter()
        .enumerate()
        .map(|(k, (uk, nk))| {
            let mut g = vec![0.0; uk.len()];
            if *nk == 0.0 {
                return g;
            }
            for (q, (uq, nq)) in units.iter().enumerate() {
                if q == k || *nq == 0.0 {
                    continue;
                }
                let c = dot(uk, uq);
                let scale = 4.0 * gamma * c / nk;
                for ((gi, a), b) in g.iter_mut().zip(uq).zip(uk) {
                    *gi += scale * (a - c * b);
                }
            }
            g
        })
        .collect()
}

/// Cycles through a list in a fresh random order every pass.
struct Cycler {
    items: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(items: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut c = Self { items, pos: 0 };
        c.items.shuffle(rng);
        c
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.items.len() {
            self.items.shuffle(rng);
            self.pos = 0;
        }
        let v = self.items[self.pos];
        self.pos += 1;
        v
    }
}

/// Picks `count` distinct proposals of positive images as starting weights.
fn initial_weights(
    data: &WeakImageSet<'_>,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let store = data.store;
    let mut pool: Vec<(usize, usize)> = data
        .positives()
        .flat_map(|i| (0..store.image(i).proposals.len()).map(move |p| (i, p)))
        .collect();
    if pool.len() < count {
        return Err(Error::Config(format!(
            "need {count} positive proposals to initialize anchors, found {}",
            pool.len()
        )));
    }
    let (chosen, _) = pool.partial_shuffle(rng, count);
    Ok(chosen
        .iter()
        .map(|&(i, p)| {
            let row = store.image(i).descriptors.row_f64(p);
            let n = norm(&row);
            row.into_iter().map(|v| v / n).collect()
        })
        .collect())
}

/// Trains an anchor bank. Deterministic for a fixed seed.
pub fn train_anchors(data: &WeakImageSet<'_>, hyper: &AnchorHyper) -> Result<AnchorBank> {
    hyper.validate()?;
    let store = data.store;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut weights = initial_weights(data, hyper.count, &mut rng)?;
    let mut log = Vec::new();
    if hyper.iterations == 0 {
        return Ok(AnchorBank {
            hyper: *hyper,
            weights,
            log,
        });
    }

    let non_empty = |i: &usize| !store.image(*i).proposals.is_empty();
    let mut pos = Cycler::new(data.positives().filter(non_empty).collect(), &mut rng);
    let mut neg = Cycler::new(data.negatives().filter(non_empty).collect(), &mut rng);
    if pos.items.is_empty() || neg.items.is_empty() {
        return Err(Error::InvalidInput(
            "anchor training needs positive and negative images with proposals".into(),
        ));
    }

    let dim = store.dim();
    let mut velocity = vec![vec![0.0; dim]; weights.len()];
    for step in 0..hyper.iterations {
        let (image, y) = if step % 2 == 0 {
            (pos.next(&mut rng), 1.0)
        } else {
            (neg.next(&mut rng), -1.0)
        };
        let descriptors = &store.image(image).descriptors;
        let ortho = if hyper.gamma > 0.0 {
            orthogonality_gradient(&weights, hyper.gamma)
        } else {
            vec![vec![0.0; dim]; weights.len()]
        };
        let hinge: Vec<Option<usize>> = weights
            .par_iter()
            .map(|w| match best_proposal(store, image, w) {
                Some((p, m)) if m > 0.0 => Some(p),
                _ => None,
            })
            .collect();
        for k in 0..weights.len() {
            let w = &mut weights[k];
            let v = &mut velocity[k];
            let row = hinge[k].map(|p| descriptors.row(p));
            for i in 0..dim {
                let mut g = hyper.lambda * w[i] + ortho[k][i];
                if let Some(row) = row {
                    g -= y * f64::from(row[i]);
                }
                v[i] = hyper.momentum * v[i] - hyper.learning_rate * g;
                w[i] += v[i];
            }
        }
        let done = step + 1;
        if hyper.log_interval > 0 && (done % hyper.log_interval == 0 || done == hyper.iterations) {
            let value = anchor_objective(&weights, hyper.lambda, hyper.gamma, data)?.value;
            log.push(ObjectiveSample {
                iteration: done,
                objective: value,
            });
        }
    }

    if let Some(k) = weights.iter().position(|w| !(norm(w) >= 1e-6)) {
        return Err(Error::Numeric(format!(
            "anchor {k} weights are zero or non-finite after training"
        )));
    }
    Ok(AnchorBank {
        hyper: *hyper,
        weights,
        log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionParams {
    /// Detections kept per anchor.
    pub top_l: usize,
    /// Suppress a box whose hard IoU with a kept one exceeds this.
    pub nms_iou: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            top_l: 5,
            nms_iou: 0.0,
        }
    }
}

impl DetectionParams {
    pub fn validate(&self) -> Result<()> {
        if self.top_l == 0 {
            return Err(Error::Config("top_l must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.nms_iou) {
            return Err(Error::Config(format!(
                "nms_iou must lie in [0, 1), got {}",
                self.nms_iou
            )));
        }
        Ok(())
    }
}

/// Top non-overlapping detections of every anchor in one image. Scores are
/// raw and may be negative.
pub fn detect_anchors(
    bank: &AnchorBank,
    store: &DescriptorStore,
    image: usize,
    params: &DetectionParams,
) -> ImageDetections {
    let proposals = &store.image(image).proposals;
    let per_anchor = (0..bank.len())
        .map(|k| {
            let scores = bank.scores(store, image, k);
            greedy_nms(proposals, &scores, params.nms_iou, params.top_l)
                .into_iter()
                .map(|p| Detection {
                    region: proposals[p],
                    score: scores[p],
                })
                .collect()
        })
        .collect();
    ImageDetections { per_anchor }
}

/// Runs [`detect_anchors`] on every image of the store.
pub fn detect_all(
    bank: &AnchorBank,
    store: &DescriptorStore,
    params: &DetectionParams,
) -> Result<AnchorDetections> {
    params.validate()?;
    if bank.dim() != store.dim() {
        return Err(Error::DimensionMismatch {
            record: "anchor bank".into(),
            expected: store.dim(),
            found: bank.dim(),
        });
    }
    let images = (0..store.len())
        .into_par_iter()
        .map(|i| detect_anchors(bank, store, i, params))
        .collect();
    Ok(AnchorDetections { images })
}
