//! Region descriptors: appearance, context, anchor-induced geometry and
//! their Kronecker combination.
//!
//! The joint embedding is laid out appearance-major: entry `i * K + k`
//! holds `phi_a[i] * phi_g[k]`. A weight vector therefore splits into `K`
//! strided per-anchor slices `w_k`, and
//! `<w, phi_a (x) phi_g> = sum_k phi_g[k] <w_k, phi_a>`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DescriptorStore, ImageEntry};
use crate::error::{Error, Result};
use crate::geometry::{iou, rho, OverlapConfig, Region};
use crate::linalg::{argmax, Matrix};

/// Region descriptor family used by a part model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Appearance only.
    #[serde(rename = "B")]
    Base,
    /// Appearance stacked with the appearance of the dilated context box.
    #[serde(rename = "B+C")]
    Context,
    /// Appearance (x) anchor geometry.
    #[serde(rename = "B+G")]
    Geometry,
    /// (Appearance, context) (x) anchor geometry.
    #[serde(rename = "B+C+G")]
    ContextGeometry,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Base,
        Variant::Context,
        Variant::Geometry,
        Variant::ContextGeometry,
    ];

    pub fn has_context(self) -> bool {
        matches!(self, Variant::Context | Variant::ContextGeometry)
    }

    pub fn has_geometry(self) -> bool {
        matches!(self, Variant::Geometry | Variant::ContextGeometry)
    }

    /// The variant with the geometric factor removed.
    pub fn appearance_part(self) -> Variant {
        if self.has_context() {
            Variant::Context
        } else {
            Variant::Base
        }
    }

    /// Embedding dimension for appearance dimension `d_a` and `k` anchors.
    pub fn dim(self, d_a: usize, k: usize) -> usize {
        let a = if self.has_context() { 2 * d_a } else { d_a };
        if self.has_geometry() {
            a * k
        } else {
            a
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "B",
            Variant::Context => "B+C",
            Variant::Geometry => "B+G",
            Variant::ContextGeometry => "B+C+G",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace(['-', '_'], "+");
        match norm.as_str() {
            "B" => Ok(Variant::Base),
            "B+C" | "BC" => Ok(Variant::Context),
            "B+G" | "BG" => Ok(Variant::Geometry),
            "B+C+G" | "BCG" => Ok(Variant::ContextGeometry),
            _ => Err(Error::Config(format!("unknown embedding variant `{s}`"))),
        }
    }
}

/// A scored anchor detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub region: Region,
    pub score: f64,
}

/// Top detections of every anchor in one image, best first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageDetections {
    pub per_anchor: Vec<Vec<Detection>>,
}

impl ImageDetections {
    pub fn anchors(&self) -> usize {
        self.per_anchor.len()
    }
}

/// Anchor detections for every image of a store, in store order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnchorDetections {
    pub images: Vec<ImageDetections>,
}

impl AnchorDetections {
    pub fn image(&self, idx: usize) -> Result<&ImageDetections> {
        self.images
            .get(idx)
            .ok_or_else(|| Error::InvalidInput(format!("no anchor detections for image {idx}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub variant: Variant,
    pub overlap: OverlapConfig,
    /// Side multiplier of the context box; must exceed one.
    pub context_scale: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            variant: Variant::ContextGeometry,
            overlap: OverlapConfig::default(),
            context_scale: 2.0,
        }
    }
}

impl EmbeddingConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.context_scale > 1.0) {
            return Err(Error::Config(format!(
                "context_scale must exceed 1, got {}",
                self.context_scale
            )));
        }
        self.overlap.validate()
    }
}

/// Centre-preserving dilation of `r` by `scale`, clipped to the image.
pub fn context_region(r: &Region, scale: f64, image_w: f64, image_h: f64) -> Result<Region> {
    if !(scale > 1.0) {
        return Err(Error::InvalidInput(format!(
            "context scale must exceed 1, got {scale}"
        )));
    }
    if r.x1() < 0.0 || r.y1() < 0.0 || r.x2() > image_w || r.y2() > image_h {
        return Err(Error::InvalidInput(format!(
            "region {r} lies outside the {image_w}x{image_h} image"
        )));
    }
    let (cx, cy) = r.center();
    let hw = 0.5 * scale * r.width();
    let hh = 0.5 * scale * r.height();
    Region::new(
        (cx - hw).max(0.0),
        (cy - hh).max(0.0),
        (cx + hw).min(image_w),
        (cy + hh).min(image_h),
    )
}

/// Proposal whose box best matches the context box of `r`, with that IoU.
pub fn context_proposal(entry: &ImageEntry, r: &Region, scale: f64) -> Result<(usize, f64)> {
    let ctx = context_region(r, scale, entry.width, entry.height)?;
    argmax(entry.proposals.iter().map(|p| iou(p, &ctx)))
        .ok_or_else(|| Error::InvalidInput(format!("image `{}` has no proposals", entry.id)))
}

/// Anchor-induced geometry of `r`: for anchor `k`, the best score-gated
/// soft overlap `max_l rho(r, R_l) * max(0, s_l)` over its detections.
pub fn geometric_embed(r: &Region, dets: &ImageDetections, overlap: &OverlapConfig) -> Vec<f64> {
    dets.per_anchor
        .iter()
        .map(|list| {
            list.iter()
                .filter(|d| d.score > 0.0)
                .map(|d| rho(r, &d.region, overlap) * d.score)
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Kronecker product in appearance-major order.
pub fn joint_embed(phi_a: &[f64], phi_g: &[f64]) -> Result<Vec<f64>> {
    if phi_a.is_empty() || phi_g.is_empty() {
        return Err(Error::InvalidInput(
            "joint embedding needs non-empty factors".into(),
        ));
    }
    let k = phi_g.len();
    let mut out = vec![0.0; phi_a.len() * k];
    for (i, a) in phi_a.iter().enumerate() {
        for (slot, g) in out[i * k..(i + 1) * k].iter_mut().zip(phi_g) {
            *slot = a * g;
        }
    }
    Ok(out)
}

fn appearance_part(
    entry: &ImageEntry,
    proposal: usize,
    context: Option<usize>,
) -> Vec<f64> {
    let mut a = entry.descriptors.row_f64(proposal);
    if let Some(c) = context {
        a.extend(entry.descriptors.row(c).iter().map(|v| f64::from(*v)));
    }
    a
}

fn compose(
    entry: &ImageEntry,
    proposal: usize,
    dets: Option<&ImageDetections>,
    cfg: &EmbeddingConfig,
) -> Result<Vec<f64>> {
    let region = entry.proposals[proposal];
    let context = if cfg.variant.has_context() {
        Some(context_proposal(entry, &region, cfg.context_scale)?.0)
    } else {
        None
    };
    let a = appearance_part(entry, proposal, context);
    if !cfg.variant.has_geometry() {
        return Ok(a);
    }
    let dets = dets.ok_or_else(|| {
        Error::Config(format!(
            "variant {} needs anchor detections",
            cfg.variant
        ))
    })?;
    let g = geometric_embed(&region, dets, &cfg.overlap);
    joint_embed(&a, &g)
}

/// Embedding of proposal `r` of image `image` under `cfg.variant`.
pub fn embed(
    store: &DescriptorStore,
    image: usize,
    r: &Region,
    dets: Option<&ImageDetections>,
    cfg: &EmbeddingConfig,
) -> Result<Vec<f64>> {
    let entry = store.image(image);
    let proposal = entry
        .proposal_index(r)
        .ok_or_else(|| Error::ProposalNotFound {
            image: entry.id.clone(),
            region: r.to_string(),
        })?;
    compose(entry, proposal, dets, cfg)
}

/// Embeddings of every proposal of one image, one row per proposal.
pub fn embed_image(
    store: &DescriptorStore,
    image: usize,
    dets: Option<&ImageDetections>,
    cfg: &EmbeddingConfig,
) -> Result<Matrix> {
    let entry = store.image(image);
    let k = dets.map(|d| d.anchors()).unwrap_or(0);
    let dim = cfg.variant.dim(store.dim(), k);
    let rows = (0..entry.proposals.len())
        .map(|p| compose(entry, p, dets, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_rows(dim, rows))
}

/// Proposal embeddings for a subset of images, keyed by store index.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub variant: Variant,
    pub dim: usize,
    slots: Vec<Option<Matrix>>,
}

impl EmbeddingTable {
    /// Embeds `images` in parallel; results do not depend on scheduling.
    pub fn build(
        store: &DescriptorStore,
        images: &[usize],
        dets: Option<&AnchorDetections>,
        cfg: &EmbeddingConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.variant.has_geometry() && dets.is_none() {
            return Err(Error::Config(format!(
                "variant {} needs anchor detections",
                cfg.variant
            )));
        }
        let k = dets
            .and_then(|d| d.images.first())
            .map(|d| d.anchors())
            .unwrap_or(0);
        let built: Vec<(usize, Matrix)> = images
            .par_iter()
            .map(|&i| {
                let d = match dets {
                    Some(all) => Some(all.image(i)?),
                    None => None,
                };
                embed_image(store, i, d, cfg).map(|m| (i, m))
            })
            .collect::<Result<_>>()?;
        let mut slots = vec![None; store.len()];
        for (i, m) in built {
            slots[i] = Some(m);
        }
        Ok(Self {
            variant: cfg.variant,
            dim: cfg.variant.dim(store.dim(), k),
            slots,
        })
    }

    pub fn get(&self, image: usize) -> Result<&Matrix> {
        self.slots
            .get(image)
            .and_then(|s| s.as_ref())
            .ok_or_else(|| Error::InvalidInput(format!("no embeddings for image {image}")))
    }
}
