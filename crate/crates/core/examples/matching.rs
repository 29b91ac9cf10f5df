//! Mean match IoU of every matching variant on noise-free congruent scenes.

use partatlas_core::anchors::{detect_all, train_anchors};
use partatlas_core::eval::{match_benchmark, MatchSettings, MatchVariant};
use partatlas_core::synth::{generate_congruent, SyntheticProfile};
use partatlas_core::{AnchorHyper, DetectionParams};

fn main() -> partatlas_core::Result<()> {
    for seed in 0..3 {
        let profile = SyntheticProfile { noise: 0.0, negatives: 40, ..SyntheticProfile::standard(seed) };
        let (set, pairs) = generate_congruent(&profile, 30)?;
        let ds = &set.dataset;
        let bank = train_anchors(&ds.anchor_set()?, &AnchorHyper::desk(seed))?;
        let dets = detect_all(&bank, &ds.store, &DetectionParams::default())?;
        let mut line = format!("seed {seed}");
        for variant in MatchVariant::ALL {
            let settings = MatchSettings { variant, ..MatchSettings::default() };
            let report = match_benchmark(&ds.store, set.ground_truth(), Some(&dets), &pairs, &settings)?;
            let parts: Vec<String> = report
                .per_concept
                .iter()
                .map(|(c, m)| format!("{c} {:.2}", m.mean_iou))
                .collect();
            line += &format!(" | {variant} {:.3} ({})", report.mean_iou, parts.join(", "));
        }
        println!("{line}");
    }
    Ok(())
}
