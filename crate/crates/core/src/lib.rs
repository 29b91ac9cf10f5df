//! Weakly supervised part learning with anchor-induced appearance-geometry
//! embeddings.
//!
//! The crate covers region overlap kernels, anchor training and detection,
//! multiple-instance part learning, evaluation metrics, a synthetic planted
//! scene generator, and the on-disk formats.

pub mod anchors;
pub mod atlas;
pub mod dataset;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod mil;
pub mod nms;
pub mod quadrature;
pub mod synth;

pub use anchors::{AnchorBank, AnchorHyper, DetectionParams};
pub use dataset::{
    Dataset, DescriptorStore, Descriptors, GroundTruth, GtBox, ImageEntry, ImageMeta, Label,
    LabeledImage, WeakImageSet,
};
pub use embeddings::{AnchorDetections, Detection, EmbeddingConfig, ImageDetections, Variant};
pub use error::{Error, Result};
pub use mil::{ExemplarSpec, MilConfig, PartModel};
pub use geometry::{iou, rho, OverlapConfig, OverlapMode, Region, SoftIntegral, Steepness};
pub use atlas::{export_atlas, AtlasGraph, AtlasParams};
pub use eval::{EvalReport, MatchSettings, MatchVariant, PartScore};
pub use io::{load_dataset, save_dataset, FileKind};
pub use synth::{generate_congruent, generate_synthetic, SyntheticProfile, SyntheticSet};
