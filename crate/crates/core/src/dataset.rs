//! In-memory data model: proposals, appearance descriptors, weak labels and
//! ground truth.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Region;

/// Row norms may deviate from one by at most this much.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

/// Dense `rows x cols` block of `f32` appearance vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptors {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Descriptors {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "descriptor buffer holds {} values, expected {rows} x {cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(cols: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::InvalidInput(format!(
                    "descriptor row has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend(r.iter().map(|v| *v as f32));
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|v| f64::from(*v)).collect()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    fn row_norm(&self, i: usize) -> f64 {
        self.row(i)
            .iter()
            .map(|v| f64::from(*v) * f64::from(*v))
            .sum::<f64>()
            .sqrt()
    }

    /// Rows whose norm is off unit length by more than the tolerance.
    pub fn off_unit_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .filter(|&i| (self.row_norm(i) - 1.0).abs() > UNIT_NORM_TOLERANCE)
            .collect()
    }

    /// Rescales off-unit rows to unit length and returns how many changed.
    pub fn normalize_rows(&mut self) -> Result<usize> {
        let off = self.off_unit_rows();
        for &i in &off {
            let n = self.row_norm(i);
            if n == 0.0 {
                return Err(Error::InvalidInput(format!(
                    "descriptor row {i} is all zeros"
                )));
            }
            let cols = self.cols;
            for v in &mut self.data[i * cols..(i + 1) * cols] {
                *v = (f64::from(*v) / n) as f32;
            }
        }
        Ok(off.len())
    }
}

/// One image: its size, region proposals and a descriptor per proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub id: String,
    pub width: f64,
    pub height: f64,
    pub proposals: Vec<Region>,
    pub descriptors: Descriptors,
}

impl ImageEntry {
    pub fn bounds(&self) -> Region {
        Region::new(0.0, 0.0, self.width, self.height).expect("validated image size")
    }

    /// Index of a proposal equal to `region`.
    pub fn proposal_index(&self, region: &Region) -> Option<usize> {
        self.proposals.iter().position(|p| p == region)
    }
}

/// Per-image proposals and L2-normalized appearance descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorStore {
    dim: usize,
    images: Vec<ImageEntry>,
    index: HashMap<String, usize>,
}

impl DescriptorStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            images: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageEntry] {
        &self.images
    }

    pub fn image(&self, idx: usize) -> &ImageEntry {
        &self.images[idx]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn by_id(&self, id: &str) -> Result<&ImageEntry> {
        self.position(id)
            .map(|i| &self.images[i])
            .ok_or_else(|| Error::UnknownImage(id.to_string()))
    }

    /// Adds an image after checking the store invariants.
    pub fn push(&mut self, entry: ImageEntry) -> Result<usize> {
        if self.index.contains_key(&entry.id) {
            return Err(Error::DuplicateId(entry.id));
        }
        if !(entry.width > 0.0 && entry.height > 0.0) {
            return Err(Error::InvalidInput(format!(
                "image `{}` has non-positive size {}x{}",
                entry.id, entry.width, entry.height
            )));
        }
        if entry.descriptors.cols() != self.dim {
            return Err(Error::DimensionMismatch {
                record: entry.id,
                expected: self.dim,
                found: entry.descriptors.cols(),
            });
        }
        if entry.descriptors.rows() != entry.proposals.len() {
            return Err(Error::DimensionMismatch {
                record: format!("{} (descriptor rows vs proposals)", entry.id),
                expected: entry.proposals.len(),
                found: entry.descriptors.rows(),
            });
        }
        if let Some(&row) = entry.descriptors.off_unit_rows().first() {
            return Err(Error::InvalidInput(format!(
                "descriptor row {row} of image `{}` is not unit norm",
                entry.id
            )));
        }
        let idx = self.images.len();
        self.index.insert(entry.id.clone(), idx);
        self.images.push(entry);
        Ok(idx)
    }
}

/// Image-level weak label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => -1.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

impl TryFrom<i8> for Label {
    type Error = String;

    fn try_from(v: i8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Label::Positive),
            -1 => Ok(Label::Negative),
            other => Err(format!("label must be +1 or -1, got {other}")),
        }
    }
}

impl From<Label> for i8 {
    fn from(l: Label) -> i8 {
        match l {
            Label::Positive => 1,
            Label::Negative => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledImage {
    /// Index into the descriptor store.
    pub image: usize,
    pub label: Label,
}

/// Weakly labelled images backed by a descriptor store.
#[derive(Debug, Clone)]
pub struct WeakImageSet<'a> {
    pub store: &'a DescriptorStore,
    pub items: Vec<LabeledImage>,
}

impl<'a> WeakImageSet<'a> {
    pub fn new(store: &'a DescriptorStore, items: Vec<LabeledImage>) -> Result<Self> {
        if !items.iter().any(|i| i.label.is_positive()) || items.iter().all(|i| i.label.is_positive())
        {
            return Err(Error::InvalidInput(
                "a weak image set needs at least one positive and one negative image".into(),
            ));
        }
        if let Some(bad) = items.iter().find(|i| i.image >= store.len()) {
            return Err(Error::InvalidInput(format!(
                "image index {} out of range",
                bad.image
            )));
        }
        Ok(Self { store, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.items
            .iter()
            .filter(|i| i.label.is_positive())
            .map(|i| i.image)
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.items
            .iter()
            .filter(|i| !i.label.is_positive())
            .map(|i| i.image)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub concept: String,
    #[serde(rename = "box")]
    pub region: Region,
    #[serde(default)]
    pub difficult: bool,
    #[serde(default)]
    pub truncated: bool,
}

impl GtBox {
    pub fn new(concept: impl Into<String>, region: Region) -> Self {
        Self {
            concept: concept.into(),
            region,
            difficult: false,
            truncated: false,
        }
    }

    /// Boxes flagged difficult or truncated are excluded from scoring.
    pub fn ignored(&self) -> bool {
        self.difficult || self.truncated
    }
}

/// Ground-truth boxes per image, aligned with the descriptor store order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub vocabulary: Vec<String>,
    pub images: Vec<Vec<GtBox>>,
}

impl GroundTruth {
    pub fn check_concept(&self, concept: &str) -> Result<()> {
        if self.vocabulary.iter().any(|c| c == concept) {
            Ok(())
        } else {
            Err(Error::UnknownConcept(concept.to_string()))
        }
    }

    pub fn boxes<'s>(&'s self, image: usize, concept: &'s str) -> impl Iterator<Item = &'s GtBox> {
        self.images
            .get(image)
            .into_iter()
            .flatten()
            .filter(move |b| b.concept == concept)
    }

    pub fn has_concept(&self, image: usize, concept: &str) -> bool {
        self.boxes(image, concept).any(|b| !b.ignored())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageMeta {
    pub uri: Option<String>,
    pub labels: BTreeMap<String, Label>,
}

/// A loaded dataset: store, per-image labels and optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocabulary: Vec<String>,
    pub store: DescriptorStore,
    pub meta: Vec<ImageMeta>,
    pub ground_truth: Option<GroundTruth>,
}

impl Dataset {
    pub fn check_concept(&self, concept: &str) -> Result<()> {
        if self.vocabulary.iter().any(|c| c == concept) {
            Ok(())
        } else {
            Err(Error::UnknownConcept(concept.to_string()))
        }
    }

    /// Images labelled for `concept`; unlabelled images are left out.
    pub fn weak_set(&self, concept: &str) -> Result<WeakImageSet<'_>> {
        self.check_concept(concept)?;
        let items = self
            .meta
            .iter()
            .enumerate()
            .filter_map(|(i, m)| {
                m.labels
                    .get(concept)
                    .map(|&label| LabeledImage { image: i, label })
            })
            .collect();
        WeakImageSet::new(&self.store, items)
    }

    /// Positives are images positive for any concept; negatives are images
    /// whose labels are all negative.
    pub fn anchor_set(&self) -> Result<WeakImageSet<'_>> {
        let items = self
            .meta
            .iter()
            .enumerate()
            .filter_map(|(i, m)| {
                if m.labels.values().any(|l| l.is_positive()) {
                    Some(LabeledImage {
                        image: i,
                        label: Label::Positive,
                    })
                } else if !m.labels.is_empty() {
                    Some(LabeledImage {
                        image: i,
                        label: Label::Negative,
                    })
                } else {
                    None
                }
            })
            .collect();
        WeakImageSet::new(&self.store, items)
    }
}
