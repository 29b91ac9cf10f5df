//! Anchor training on planted patterns.

use partatlas_core::anchors::train_anchors;
use partatlas_core::synth::{generate_two_pattern, TwoPatternProfile};
use partatlas_core::{AnchorHyper, WeakImageSet};

/// Share of the images holding a planted pattern where anchor `k` ranks
/// that pattern's proposal first.
fn top_share(bank: &partatlas_core::AnchorBank, set: &partatlas_core::synth::TwoPatternSet, at: &[(usize, usize)], k: usize) -> f64 {
    let hits = at
        .iter()
        .filter(|&&(image, proposal)| {
            let scores = bank.scores(&set.store, image, k);
            let best = (0..scores.len()).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
            best == proposal
        })
        .count();
    hits as f64 / at.len() as f64
}

#[test]
fn diverse_anchors_split_the_planted_patterns() {
    let set = generate_two_pattern(&TwoPatternProfile { seed: 21, ..TwoPatternProfile::default() }).unwrap();
    let data = WeakImageSet::new(&set.store, set.items.clone()).unwrap();
    let hyper = AnchorHyper { count: 2, lambda: 0.3, gamma: 1.0, iterations: 4_000, seed: 21, ..AnchorHyper::default() };
    let bank = train_anchors(&data, &hyper).unwrap();
    let a = [top_share(&bank, &set, &set.a_at, 0), top_share(&bank, &set, &set.a_at, 1)];
    let b = [top_share(&bank, &set, &set.b_at, 0), top_share(&bank, &set, &set.b_at, 1)];
    // One anchor owns A and the other owns B.
    let split = (a[0] > 0.9 && b[1] > 0.9) || (a[1] > 0.9 && b[0] > 0.9);
    assert!(split, "A shares {a:?}, B shares {b:?}");
}

#[test]
fn training_is_reproducible_across_runs() {
    let set = generate_two_pattern(&TwoPatternProfile { seed: 22, ..TwoPatternProfile::default() }).unwrap();
    let data = WeakImageSet::new(&set.store, set.items.clone()).unwrap();
    let hyper = AnchorHyper { count: 3, iterations: 300, seed: 22, ..AnchorHyper::desk(22) };
    assert_eq!(train_anchors(&data, &hyper).unwrap(), train_anchors(&data, &hyper).unwrap());
}
