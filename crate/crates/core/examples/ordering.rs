//! Seed-averaged CorLoc of every variant on the standard synthetic profile.
//!
//! Usage: `cargo run --release --example ordering -- [seeds]`

use std::time::Instant;

use partatlas_core::anchors::{detect_all, train_anchors};
use partatlas_core::eval::{corloc, top1_regions, DEFAULT_IOU_THRESHOLD};
use partatlas_core::mil::train_part;
use partatlas_core::synth::{generate_synthetic, SyntheticProfile};
use partatlas_core::{AnchorHyper, DetectionParams, MilConfig, Variant};

fn main() -> partatlas_core::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let start = Instant::now();
    let mut totals = vec![0.0; Variant::ALL.len()];
    for seed in 0..seeds {
        let set = generate_synthetic(&SyntheticProfile::standard(seed))?;
        let ds = &set.dataset;
        let gt = set.ground_truth();
        let bank = train_anchors(&ds.anchor_set()?, &AnchorHyper::desk(seed))?;
        let dets = detect_all(&bank, &ds.store, &DetectionParams::default())?;
        for (slot, &variant) in Variant::ALL.iter().enumerate() {
            let mut row = Vec::new();
            for concept in &ds.vocabulary {
                let data = ds.weak_set(concept)?;
                let cfg = MilConfig { seed, ..MilConfig::default() }.with_variant(variant);
                let model = train_part(concept, &data, Some(&dets), None, &cfg)?;
                let clean = set.clean_positives(concept);
                let top: Vec<_> = top1_regions(&model, &data, Some(&dets))?
                    .into_iter()
                    .filter(|(i, _)| clean.contains(i))
                    .collect();
                row.push(corloc(&top, gt, concept, DEFAULT_IOU_THRESHOLD)?);
            }
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            totals[slot] += mean / seeds as f64;
            let cells: Vec<String> = row.iter().map(|x| format!("{x:.2}")).collect();
            println!("seed {seed} {variant:>6}: [{}] mean {mean:.3}", cells.join(" "));
        }
    }
    for (variant, total) in Variant::ALL.iter().zip(&totals) {
        println!("{variant:>6}: {total:.3}");
    }
    println!("elapsed {:.1?}", start.elapsed());
    Ok(())
}
