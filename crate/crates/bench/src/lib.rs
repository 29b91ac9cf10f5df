//! Shared fixtures for the benchmarks.

use partatlas_core::anchors::{detect_all, train_anchors};
use partatlas_core::synth::{generate_synthetic, SyntheticProfile};
use partatlas_core::{AnchorDetections, AnchorHyper, Dataset, DetectionParams, Region};

/// Deterministic pseudo-random regions inside a `extent`-sided square.
pub fn regions(n: usize, extent: f64) -> Vec<Region> {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    (0..n)
        .map(|_| {
            let (w, h) = (2.0 + next() * extent * 0.5, 2.0 + next() * extent * 0.5);
            let (x, y) = (next() * (extent - w), next() * (extent - h));
            Region::new(x, y, x + w, y + h).expect("valid region")
        })
        .collect()
}

/// A small scene set with its anchor detections.
pub struct SceneFixture {
    pub dataset: Dataset,
    pub detections: AnchorDetections,
}

pub fn scenes(images: usize) -> SceneFixture {
    let profile = SyntheticProfile {
        images,
        negatives: images / 2,
        ..SyntheticProfile::standard(0)
    };
    let dataset = generate_synthetic(&profile).expect("valid profile").dataset;
    let hyper = AnchorHyper {
        iterations: 500,
        ..AnchorHyper::desk(0)
    };
    let bank = train_anchors(&dataset.anchor_set().expect("labels"), &hyper).expect("anchors");
    let detections =
        detect_all(&bank, &dataset.store, &DetectionParams::default()).expect("detections");
    SceneFixture {
        dataset,
        detections,
    }
}
