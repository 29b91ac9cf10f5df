//! On-disk formats.
//!
//! Descriptor matrices use a small binary layout: the magic bytes `AMIL`,
//! then `version`, `rows` and `cols` as little-endian `u32`, then
//! `rows * cols` little-endian `f32` values in row-major order. Everything
//! else is JSON with `format` and `version` fields; loaders reject files of
//! another format or version.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    Dataset, DescriptorStore, Descriptors, GroundTruth, GtBox, ImageEntry, ImageMeta, Label,
};
use crate::error::{Error, Result};
use crate::geometry::Region;

pub const DESCRIPTOR_MAGIC: [u8; 4] = *b"AMIL";
pub const DESCRIPTOR_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Version written into, and required of, every JSON file.
pub const JSON_VERSION: u32 = 1;

/// JSON file kinds and their `format` tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Manifest,
    Proposals,
    PartModel,
    AnchorBank,
    AnchorDetections,
    Atlas,
    Report,
    /// `(source, target)` image pairs for the match benchmark.
    Pairs,
    /// Reproducibility record of one command-line run.
    Run,
}

impl FileKind {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Manifest => "partatlas-manifest",
            Self::Proposals => "partatlas-proposals",
            Self::PartModel => "partatlas-part-model",
            Self::AnchorBank => "partatlas-anchor-bank",
            Self::AnchorDetections => "partatlas-anchor-detections",
            Self::Atlas => "partatlas-atlas",
            Self::Report => "partatlas-report",
            Self::Pairs => "partatlas-pairs",
            Self::Run => "partatlas-run",
        }
    }
}

pub fn encode_descriptors(d: &Descriptors) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * d.as_slice().len());
    out.extend_from_slice(&DESCRIPTOR_MAGIC);
    out.extend_from_slice(&DESCRIPTOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(d.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(d.cols() as u32).to_le_bytes());
    for v in d.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a descriptor file's bytes; `path` is only used in errors.
pub fn decode_descriptors(bytes: &[u8], path: &Path) -> Result<Descriptors> {
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 4 || bytes[..4] != DESCRIPTOR_MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(malformed("truncated header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != DESCRIPTOR_VERSION {
        return Err(Error::UnsupportedVersion {
            kind: "descriptor",
            path: path.to_path_buf(),
            found: version,
            expected: DESCRIPTOR_VERSION,
        });
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| malformed("header size overflows".into()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(malformed(format!(
            "{rows} x {cols} header needs {expected} payload bytes, found {}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Descriptors::new(rows, cols, data)
}

pub fn write_descriptors(path: &Path, d: &Descriptors) -> Result<()> {
    fs::write(path, encode_descriptors(d)).map_err(|e| Error::io(path, e))
}

pub fn read_descriptors(path: &Path) -> Result<Descriptors> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_descriptors(&bytes, path)
}

#[derive(Serialize)]
struct EnvelopeOut<'a, T: Serialize> {
    format: &'static str,
    version: u32,
    #[serde(flatten)]
    body: &'a T,
}

/// Serializes `value` with its `format` and `version` fields.
pub fn to_json<T: Serialize>(kind: FileKind, value: &T) -> Result<String> {
    serde_json::to_string_pretty(&EnvelopeOut {
        format: kind.tag(),
        version: JSON_VERSION,
        body: value,
    })
    .map_err(|e| Error::InvalidInput(format!("cannot serialize {}: {e}", kind.tag())))
}

/// Parses a JSON document of the given kind; `path` is only used in errors.
pub fn from_json<T: DeserializeOwned>(kind: FileKind, text: &str, path: &Path) -> Result<T> {
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let mut value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| malformed("top level is not an object".into()))?;
    match obj.remove("format") {
        Some(serde_json::Value::String(f)) if f == kind.tag() => {}
        Some(other) => {
            return Err(malformed(format!(
                "format is {other}, expected \"{}\"",
                kind.tag()
            )))
        }
        None => return Err(malformed("missing `format` field".into())),
    }
    let version = obj
        .remove("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| malformed("missing or non-integer `version` field".into()))?;
    if version != u64::from(JSON_VERSION) {
        return Err(Error::UnsupportedVersion {
            kind: kind.tag(),
            path: path.to_path_buf(),
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: JSON_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| malformed(e.to_string()))
}

pub fn save_json<T: Serialize>(path: &Path, kind: FileKind, value: &T) -> Result<()> {
    let text = to_json(kind, value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path, kind: FileKind) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(kind, &text, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProposalFile {
    boxes: Vec<Region>,
}

/// One image record of a dataset manifest. File paths are relative to the
/// manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: String,
    pub width: f64,
    pub height: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uri: Option<String>,
    #[serde(default)]
    pub labels: BTreeMap<String, Label>,
    pub proposals: PathBuf,
    pub descriptors: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<Vec<GtBox>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Appearance descriptor dimension.
    pub dim: usize,
    pub vocabulary: Vec<String>,
    /// Present when the dataset carries ground truth; may extend the label
    /// vocabulary with concepts that are only annotated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_vocabulary: Option<Vec<String>>,
    pub images: Vec<ManifestImage>,
}

/// Writes the manifest at `path` and one proposal and one descriptor file
/// per image into a sibling directory named after the manifest.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let files = PathBuf::from(format!("{stem}.files"));
    fs::create_dir_all(dir.join(&files)).map_err(|e| Error::io(dir.join(&files), e))?;
    let gt = ds.ground_truth.as_ref();
    let images = ds
        .store
        .images()
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            let boxes = files.join(format!("{i:06}.boxes.json"));
            let desc = files.join(format!("{i:06}.amil"));
            save_json(
                &dir.join(&boxes),
                FileKind::Proposals,
                &ProposalFile {
                    boxes: entry.proposals.clone(),
                },
            )?;
            write_descriptors(&dir.join(&desc), &entry.descriptors)?;
            let meta = ds.meta.get(i).cloned().unwrap_or_default();
            Ok(ManifestImage {
                id: entry.id.clone(),
                width: entry.width,
                height: entry.height,
                uri: meta.uri,
                labels: meta.labels,
                proposals: boxes,
                descriptors: desc,
                gt: gt.map(|g| g.images.get(i).cloned().unwrap_or_default()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        dim: ds.store.dim(),
        vocabulary: ds.vocabulary.clone(),
        gt_vocabulary: gt.map(|g| g.vocabulary.clone()),
        images,
    };
    save_json(path, FileKind::Manifest, &manifest)
}

fn resolve(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

fn load_image(dir: &Path, rec: &ManifestImage, dim: usize) -> Result<ImageEntry> {
    let missing = |p: &Path| Error::MissingFile {
        path: p.to_path_buf(),
        record: rec.id.clone(),
    };
    let boxes_path = resolve(dir, &rec.proposals);
    let desc_path = resolve(dir, &rec.descriptors);
    if !boxes_path.is_file() {
        return Err(missing(&boxes_path));
    }
    if !desc_path.is_file() {
        return Err(missing(&desc_path));
    }
    let boxes: ProposalFile = load_json(&boxes_path, FileKind::Proposals)?;
    let mut descriptors = read_descriptors(&desc_path)?;
    if descriptors.cols() != dim {
        return Err(Error::DimensionMismatch {
            record: rec.id.clone(),
            expected: dim,
            found: descriptors.cols(),
        });
    }
    if descriptors.rows() != boxes.boxes.len() {
        return Err(Error::DimensionMismatch {
            record: format!("{} (descriptor rows vs proposals)", rec.id),
            expected: boxes.boxes.len(),
            found: descriptors.rows(),
        });
    }
    let off = descriptors.off_unit_rows();
    if !off.is_empty() {
        log::warn!(
            "image `{}`: {} descriptor rows off unit norm, renormalizing",
            rec.id,
            off.len()
        );
        descriptors.normalize_rows()?;
    }
    Ok(ImageEntry {
        id: rec.id.clone(),
        width: rec.width,
        height: rec.height,
        proposals: boxes.boxes,
        descriptors,
    })
}

/// Loads and validates a dataset manifest and the files it references.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.is_file() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
            record: "manifest".into(),
        });
    }
    let manifest: Manifest = load_json(path, FileKind::Manifest)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    if manifest.dim == 0 {
        return Err(malformed("descriptor dimension must be positive".into()));
    }
    let mut seen = BTreeSet::new();
    let vocab: BTreeSet<&str> = manifest.vocabulary.iter().map(String::as_str).collect();
    let gt_vocab: Option<BTreeSet<&str>> = manifest
        .gt_vocabulary
        .as_ref()
        .map(|v| v.iter().map(String::as_str).collect());
    for rec in &manifest.images {
        if !seen.insert(rec.id.as_str()) {
            return Err(Error::DuplicateId(rec.id.clone()));
        }
        if let Some(c) = rec.labels.keys().find(|c| !vocab.contains(c.as_str())) {
            return Err(malformed(format!("image `{}` labels unknown concept `{c}`", rec.id)));
        }
        for b in rec.gt.iter().flatten() {
            match &gt_vocab {
                Some(v) if v.contains(b.concept.as_str()) => {}
                Some(_) => {
                    return Err(malformed(format!(
                        "image `{}` annotates unknown concept `{}`",
                        rec.id, b.concept
                    )))
                }
                None => {
                    return Err(malformed(format!(
                        "image `{}` has ground truth but the manifest declares no gt_vocabulary",
                        rec.id
                    )))
                }
            }
        }
    }
    let entries = manifest
        .images
        .par_iter()
        .map(|rec| load_image(dir, rec, manifest.dim))
        .collect::<Result<Vec<_>>>()?;
    let mut store = DescriptorStore::new(manifest.dim);
    for e in entries {
        store.push(e)?;
    }
    let meta = manifest
        .images
        .iter()
        .map(|r| ImageMeta {
            uri: r.uri.clone(),
            labels: r.labels.clone(),
        })
        .collect();
    let ground_truth = manifest.gt_vocabulary.clone().map(|vocabulary| GroundTruth {
        vocabulary,
        images: manifest
            .images
            .iter()
            .map(|r| r.gt.clone().unwrap_or_default())
            .collect(),
    });
    Ok(Dataset {
        vocabulary: manifest.vocabulary,
        store,
        meta,
        ground_truth,
    })
}
