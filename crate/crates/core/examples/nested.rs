//! Which of two nested nose extents B+C+G selects, with and without an
//! annotated exemplar.
//!
//! Usage: `cargo run --release --example nested -- [beta]`

use partatlas_core::anchors::{detect_all, train_anchors};
use partatlas_core::mil::train_part;
use partatlas_core::synth::{generate_synthetic, SceneKind, SyntheticProfile};
use partatlas_core::{iou, AnchorHyper, DetectionParams, ExemplarSpec, MilConfig, PartModel, Variant};

const EXTENTS: [&str; 2] = ["nose", "nose-tip"];

fn main() -> partatlas_core::Result<()> {
    let beta: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5.0);
    for seed in 0..5 {
        let set = generate_synthetic(&SyntheticProfile::nested(seed))?;
        let ds = &set.dataset;
        let gt = set.ground_truth();
        let bank = train_anchors(&ds.anchor_set()?, &AnchorHyper::desk(seed))?;
        let dets = detect_all(&bank, &ds.store, &DetectionParams::default())?;
        let data = ds.weak_set("nose")?;
        let cfg = MilConfig { seed, ..MilConfig::default() }.with_variant(Variant::ContextGeometry);
        let clean = set.clean_positives("nose");
        let share = |model: &PartModel, concept: &str| {
            let hits = model
                .selections
                .iter()
                .filter(|(i, _)| clean.contains(i))
                .filter(|&&(i, p)| {
                    let r = ds.store.image(i).proposals[p];
                    gt.boxes(i, concept).any(|g| iou(&g.region, &r) >= 0.4)
                })
                .count();
            hits as f64 / clean.len() as f64
        };
        let shares = |m: &PartModel| format!("outer {:.2} tip {:.2}", share(m, EXTENTS[0]), share(m, EXTENTS[1]));

        let plain = train_part("nose", &data, Some(&dets), None, &cfg)?;
        let mut line = format!("seed {seed} plain {}", shares(&plain));
        let example = *clean
            .iter()
            .find(|&&i| set.scenes[i].kind == SceneKind::Object)
            .expect("a whole-object positive");
        for extent in EXTENTS {
            let region = gt.boxes(example, extent).next().expect("annotated extent").region;
            let spec = ExemplarSpec { image: ds.store.image(example).id.clone(), region, beta };
            let model = train_part("nose", &data, Some(&dets), Some(&spec), &cfg)?;
            line += &format!(" | exemplar {extent}: {}", shares(&model));
        }
        println!("{line}");
    }
    Ok(())
}
