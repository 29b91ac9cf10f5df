//! Acceptance suite: one test per criterion, each printing a PASS or FAIL
//! line before asserting.

use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use partatlas_core::anchors::{anchor_objective, anchor_objective_and_gradient, detect_all, train_anchors};
use partatlas_core::atlas::export_atlas;
use partatlas_core::embeddings::geometric_embed;
use partatlas_core::eval::matching::match_regions;
use partatlas_core::eval::metrics::{average_precision, corloc};
use partatlas_core::eval::{match_benchmark, top1_regions, DEFAULT_IOU_THRESHOLD};
use partatlas_core::geometry::{gram_matrix, soft_step};
use partatlas_core::io::{load_json, save_json, DESCRIPTOR_MAGIC, DESCRIPTOR_VERSION};
use partatlas_core::linalg::dot;
use partatlas_core::mil::train_part;
use partatlas_core::synth::{
    generate_planted, generate_two_pattern, PlantedProfile, SceneKind, TwoPatternProfile,
};
use partatlas_core::{
    generate_congruent, generate_synthetic, iou, load_dataset, rho, save_dataset, AnchorBank,
    AnchorDetections, AnchorHyper, AtlasGraph, AtlasParams, Detection, DetectionParams,
    ExemplarSpec, FileKind, GroundTruth, GtBox, ImageDetections, MatchSettings, MatchVariant,
    MilConfig, OverlapConfig, PartModel, Region, SoftIntegral, Steepness, SyntheticProfile,
    Variant, WeakImageSet,
};

fn verdict(name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "{status} {name}: {detail}").expect("stdout");
}

fn random_region(rng: &mut ChaCha8Rng, extent: f64, min_side: f64, max_side: f64) -> Region {
    let w = rng.random_range(min_side..max_side);
    let h = rng.random_range(min_side..max_side);
    let x = rng.random_range(0.0..extent - w);
    let y = rng.random_range(0.0..extent - h);
    Region::new(x, y, x + w, y + h).unwrap()
}

fn min_eigenvalue(g: &partatlas_core::linalg::Matrix) -> f64 {
    let m = DMatrix::from_row_slice(g.rows(), g.cols(), g.as_slice());
    m.symmetric_eigen().eigenvalues.min()
}

#[test]
fn kernel_soundness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        let regions: Vec<Region> = (0..20).map(|_| random_region(&mut rng, 200.0, 2.0, 120.0)).collect();
        let alpha = 10f64.powf(rng.random_range(-1.5..1.0));
        for cfg in [OverlapConfig::hard(), OverlapConfig::soft_fixed(alpha)] {
            worst = worst.min(min_eigenvalue(&gram_matrix(&regions, &cfg)));
        }
    }
    let elapsed = start.elapsed();
    let pass = worst >= -1e-8 && elapsed < Duration::from_secs(10);
    verdict(
        "kernel soundness",
        pass,
        &format!("min eigenvalue {worst:.3e} over 200 Gram matrices in {elapsed:.2?}"),
    );
    assert!(pass);
}

/// Midpoint sum of the four-sigmoid product along one axis on a dense grid.
/// The integrand decays exponentially at both ends of the window, so the
/// sum converges far faster than the nominal second order.
fn grid_axis(a1: f64, a2: f64, b1: f64, b2: f64, alpha: f64, steps: usize) -> f64 {
    let pad = 40.0 / alpha;
    let lo = a1.min(b1) - pad;
    let hi = a2.max(b2) + pad;
    let h = (hi - lo) / steps as f64;
    (0..steps)
        .map(|i| {
            let x = lo + (i as f64 + 0.5) * h;
            soft_step(alpha, x - a1) * soft_step(alpha, a2 - x) * soft_step(alpha, x - b1) * soft_step(alpha, b2 - x)
        })
        .sum::<f64>()
        * h
}

fn grid_inner(r: &Region, q: &Region, alpha: f64, steps: usize) -> f64 {
    grid_axis(r.x1(), r.x2(), q.x1(), q.x2(), alpha, steps) * grid_axis(r.y1(), r.y2(), q.y1(), q.y2(), alpha, steps)
}

fn grid_rho(r: &Region, q: &Region, alpha: f64, steps: usize) -> f64 {
    let rq = grid_inner(r, q, alpha, steps);
    rq / (grid_inner(r, r, alpha, steps) + grid_inner(q, q, alpha, steps) - rq)
}

/// Full 2-D midpoint sum, without using separability.
fn grid_rho_2d(r: &Region, q: &Region, alpha: f64, steps: usize) -> f64 {
    let pad = 40.0 / alpha;
    let (x0, x1) = (r.x1().min(q.x1()) - pad, r.x2().max(q.x2()) + pad);
    let (y0, y1) = (r.y1().min(q.y1()) - pad, r.y2().max(q.y2()) + pad);
    let (hx, hy) = ((x1 - x0) / steps as f64, (y1 - y0) / steps as f64);
    let indicator = |b: &Region, x: f64, y: f64| {
        soft_step(alpha, x - b.x1()) * soft_step(alpha, b.x2() - x) * soft_step(alpha, y - b.y1()) * soft_step(alpha, b.y2() - y)
    };
    let (mut rr, mut qq, mut rq) = (0.0, 0.0, 0.0);
    for i in 0..steps {
        let x = x0 + (i as f64 + 0.5) * hx;
        for j in 0..steps {
            let y = y0 + (j as f64 + 0.5) * hy;
            let (a, b) = (indicator(r, x, y), indicator(q, x, y));
            rr += a * a;
            qq += b * b;
            rq += a * b;
        }
    }
    rq / (rr + qq - rq)
}

#[test]
fn soft_overlap_limit_and_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let sharp = OverlapConfig::soft_fixed(1000.0);
    let mut limit_err = 0.0f64;
    for _ in 0..100 {
        let r = random_region(&mut rng, 1.0, 0.1, 0.7);
        let q = random_region(&mut rng, 1.0, 0.1, 0.7);
        limit_err = limit_err.max((rho(&r, &q, &sharp) - iou(&r, &q)).abs());
    }

    let mut quad_err = 0.0f64;
    let mut closed_err = 0.0f64;
    for _ in 0..20 {
        let r = random_region(&mut rng, 100.0, 5.0, 60.0);
        let q = random_region(&mut rng, 100.0, 5.0, 60.0);
        let alpha = rng.random_range(0.2..2.0);
        let oracle = grid_rho(&r, &q, alpha, 100_000);
        let cfg = OverlapConfig::soft_fixed(alpha);
        quad_err = quad_err.max((rho(&r, &q, &cfg.with_integral(SoftIntegral::GaussLegendre)) - oracle).abs());
        closed_err = closed_err.max((rho(&r, &q, &cfg) - oracle).abs());
    }
    let mut planar_err = 0.0f64;
    for _ in 0..2 {
        let r = random_region(&mut rng, 40.0, 5.0, 25.0);
        let q = random_region(&mut rng, 40.0, 5.0, 25.0);
        let cfg = OverlapConfig::soft_fixed(0.5).with_integral(SoftIntegral::GaussLegendre);
        planar_err = planar_err.max((rho(&r, &q, &cfg) - grid_rho_2d(&r, &q, 0.5, 1500)).abs());
    }

    let pass = limit_err <= 0.02 && quad_err <= 1e-4 && closed_err <= 1e-4 && planar_err <= 1e-4;
    verdict(
        "soft overlap limit and quadrature",
        pass,
        &format!(
            "max |SIoU - IoU| {limit_err:.4} at alpha 1000; quadrature vs grid {quad_err:.2e}, closed form vs grid {closed_err:.2e}, 2-D grid {planar_err:.2e}"
        ),
    );
    assert!(pass);
}

fn random_detections(rng: &mut ChaCha8Rng, anchors: usize, per: usize) -> ImageDetections {
    ImageDetections {
        per_anchor: (0..anchors)
            .map(|_| {
                (0..per)
                    .map(|_| Detection {
                        region: random_region(rng, 300.0, 20.0, 200.0),
                        score: rng.random_range(-0.5..2.0),
                    })
                    .collect()
            })
            .collect(),
    }
}

fn transform_detections(d: &ImageDetections, s: f64, tx: f64, ty: f64) -> ImageDetections {
    ImageDetections {
        per_anchor: d
            .per_anchor
            .iter()
            .map(|list| {
                list.iter()
                    .map(|det| Detection {
                        region: det.region.similarity(s, tx, ty).unwrap(),
                        score: det.score,
                    })
                    .collect()
            })
            .collect(),
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn similarity_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut hard, mut fixed, mut adaptive) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let r = random_region(&mut rng, 300.0, 20.0, 200.0);
        let dets = random_detections(&mut rng, 6, 4);
        let s = 2f64.powf(rng.random_range(-2.0..2.0));
        let (tx, ty) = (rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3));
        let r2 = r.similarity(s, tx, ty).unwrap();
        let dets2 = transform_detections(&dets, s, tx, ty);

        let h = OverlapConfig::hard();
        hard = hard.max(max_abs_diff(&geometric_embed(&r, &dets, &h), &geometric_embed(&r2, &dets2, &h)));

        let alpha = rng.random_range(0.05..1.0);
        let a = geometric_embed(&r, &dets, &OverlapConfig::soft_fixed(alpha));
        let b = geometric_embed(&r2, &dets2, &OverlapConfig::soft_fixed(alpha / s));
        fixed = fixed.max(max_abs_diff(&a, &b));

        let cfg = OverlapConfig::default();
        assert!(matches!(cfg.steepness, Steepness::ScaleAdaptive { .. }));
        adaptive = adaptive.max(max_abs_diff(&geometric_embed(&r, &dets, &cfg), &geometric_embed(&r2, &dets2, &cfg)));
    }
    let pass = hard <= 1e-12 && fixed <= 1e-6 && adaptive <= 1e-6;
    verdict(
        "similarity invariance",
        pass,
        &format!("max deviation hard {hard:.2e}, soft alpha/s {fixed:.2e}, soft adaptive {adaptive:.2e}"),
    );
    assert!(pass);
}

/// Smallest distance of the current weights to a kink of the objective:
/// a tie between the two best proposals of an image or a top score at 0.
fn kink_margin(weights: &[Vec<f64>], data: &WeakImageSet<'_>) -> f64 {
    let mut margin = f64::INFINITY;
    for w in weights {
        for item in &data.items {
            let entry = data.store.image(item.image);
            let mut scores: Vec<f64> = (0..entry.proposals.len())
                .map(|p| dot(&entry.descriptors.row_f64(p), w))
                .collect();
            scores.sort_by(|a, b| b.total_cmp(a));
            margin = margin.min(scores[0].abs());
            if scores.len() > 1 {
                margin = margin.min(scores[0] - scores[1]);
            }
        }
    }
    margin
}

#[test]
fn anchor_gradient_check() {
    let set = generate_planted(&PlantedProfile { seed: 14, ..PlantedProfile::default() }).unwrap();
    let data = WeakImageSet::new(&set.store, set.items.clone()).unwrap();
    let dim = set.store.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut points = 0;
    while points < 20 {
        let k = rng.random_range(2..5);
        let weights: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        // Stay clear of the max and hinge kinks so central differences are
        // meaningful.
        if kink_margin(&weights, &data) < 1e-3 {
            continue;
        }
        let lambda = rng.random_range(1e-4..1.0);
        let gamma = rng.random_range(0.0..2.0);
        let (_, grad) = anchor_objective_and_gradient(&weights, lambda, gamma, &data).unwrap();
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for a in 0..k {
            for j in 0..dim {
                let mut plus = weights.clone();
                let mut minus = weights.clone();
                plus[a][j] += h;
                minus[a][j] -= h;
                let fd = (anchor_objective(&plus, lambda, gamma, &data).unwrap().value
                    - anchor_objective(&minus, lambda, gamma, &data).unwrap().value)
                    / (2.0 * h);
                diff += (fd - grad[a][j]).powi(2);
                scale += fd.powi(2).max(grad[a][j].powi(2));
            }
        }
        worst = worst.max(diff.sqrt() / scale.sqrt().max(1e-12));
        points += 1;
    }
    let pass = worst <= 1e-4;
    verdict("anchor gradient check", pass, &format!("max relative error {worst:.2e} over 20 points"));
    assert!(pass);
}

fn mean_abs_cosine(weights: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..weights.len() {
        for j in i + 1..weights.len() {
            let (a, b) = (&weights[i], &weights[j]);
            total += (dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())).abs();
            pairs += 1;
        }
    }
    total / pairs as f64
}

#[test]
fn orthogonality_prevents_duplicate_anchors() {
    let start = Instant::now();
    let set = generate_two_pattern(&TwoPatternProfile { seed: 15, ..TwoPatternProfile::default() }).unwrap();
    let data = WeakImageSet::new(&set.store, set.items.clone()).unwrap();
    let hyper = |gamma: f64| AnchorHyper {
        count: 2,
        lambda: 1.0,
        gamma,
        iterations: 4_000,
        log_interval: 4_000,
        seed: 15,
        ..AnchorHyper::default()
    };
    let diverse = mean_abs_cosine(&train_anchors(&data, &hyper(1.0)).unwrap().weights);
    let collapsed = mean_abs_cosine(&train_anchors(&data, &hyper(0.0)).unwrap().weights);
    let elapsed = start.elapsed();
    let pass = diverse < 0.3 && collapsed > 0.9 && elapsed < Duration::from_secs(60);
    verdict(
        "anchor diversity",
        pass,
        &format!("mean |cos| gamma=1 {diverse:.3}, gamma=0 {collapsed:.3} in {elapsed:.2?}"),
    );
    assert!(pass);
}

/// Largest within-phase increase of the logged objective.
fn worst_increase(model: &PartModel) -> f64 {
    model
        .log
        .windows(2)
        .filter(|w| w[0].phase == w[1].phase)
        .map(|w| w[1].objective - w[0].objective)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn mil_monotone_descent() {
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..10 {
        let planted = generate_planted(&PlantedProfile {
            noise: 0.05 + 0.05 * (seed % 4) as f64,
            outlier_fraction: 0.1 * (seed % 3) as f64,
            seed,
            ..PlantedProfile::default()
        })
        .unwrap();
        let data = WeakImageSet::new(&planted.store, planted.items.clone()).unwrap();
        let cfg = MilConfig { seed, ..MilConfig::default() }.with_variant(Variant::Base);
        worst = worst.max(worst_increase(&train_part("part", &data, None, None, &cfg).unwrap()));

        let profile = SyntheticProfile { images: 40, negatives: 20, ..SyntheticProfile::standard(seed) };
        let set = generate_synthetic(&profile).unwrap();
        let ds = &set.dataset;
        let bank = train_anchors(&ds.anchor_set().unwrap(), &AnchorHyper::desk(seed)).unwrap();
        let dets = detect_all(&bank, &ds.store, &DetectionParams::default()).unwrap();
        let data = ds.weak_set("wheel").unwrap();
        let cfg = cfg.with_variant(Variant::ContextGeometry);
        worst = worst.max(worst_increase(&train_part("wheel", &data, Some(&dets), None, &cfg).unwrap()));
    }
    let pass = worst <= 1e-3;
    verdict(
        "MIL monotone descent",
        pass,
        &format!("largest within-phase increase {worst:.2e} over 10 planted and 10 scene datasets"),
    );
    assert!(pass);
}

#[test]
fn variant_ordering() {
    let start = Instant::now();
    let seeds = 5u64;
    let variants = [Variant::Base, Variant::Geometry, Variant::ContextGeometry];
    let mut means = [0.0; 3];
    for seed in 0..seeds {
        let set = generate_synthetic(&SyntheticProfile::standard(seed)).unwrap();
        let ds = &set.dataset;
        let gt = set.ground_truth();
        let bank = train_anchors(&ds.anchor_set().unwrap(), &AnchorHyper::desk(seed)).unwrap();
        let dets = detect_all(&bank, &ds.store, &DetectionParams::default()).unwrap();
        for (slot, &variant) in variants.iter().enumerate() {
            let mut total = 0.0;
            for concept in &ds.vocabulary {
                let data = ds.weak_set(concept).unwrap();
                let cfg = MilConfig { seed, ..MilConfig::default() }.with_variant(variant);
                let model = train_part(concept, &data, Some(&dets), None, &cfg).unwrap();
                let clean = set.clean_positives(concept);
                let top: Vec<_> = top1_regions(&model, &data, Some(&dets))
                    .unwrap()
                    .into_iter()
                    .filter(|(i, _)| clean.contains(i))
                    .collect();
                total += corloc(&top, gt, concept, DEFAULT_IOU_THRESHOLD).unwrap();
            }
            means[slot] += total / ds.vocabulary.len() as f64 / seeds as f64;
        }
    }
    let [b, bg, bcg] = means;
    let elapsed = start.elapsed();
    let pass = bg >= b && bcg >= b && bcg >= 0.8 && elapsed < Duration::from_secs(600);
    verdict(
        "variant ordering",
        pass,
        &format!("CorLoc B {b:.3}, B+G {bg:.3}, B+C+G {bcg:.3} over {seeds} seeds in {elapsed:.1?}"),
    );
    assert!(pass);
}

#[test]
fn exemplar_selects_annotated_extent() {
    let extents = ["nose", "nose-tip"];
    let (mut plain_hits, mut guided_hits, mut total) = ([0usize; 2], [0usize; 2], 0usize);
    let mut identical = true;
    for seed in 0..5 {
        let set = generate_synthetic(&SyntheticProfile::nested(seed)).unwrap();
        let ds = &set.dataset;
        let gt = set.ground_truth();
        let bank = train_anchors(&ds.anchor_set().unwrap(), &AnchorHyper::desk(seed)).unwrap();
        let dets = detect_all(&bank, &ds.store, &DetectionParams::default()).unwrap();
        let data = ds.weak_set("nose").unwrap();
        let cfg = MilConfig { seed, ..MilConfig::default() }.with_variant(Variant::ContextGeometry);
        let clean = set.clean_positives("nose");
        let hits = |model: &PartModel, concept: &str| {
            model
                .selections
                .iter()
                .filter(|(i, _)| clean.contains(i))
                .filter(|&&(i, p)| {
                    let r = ds.store.image(i).proposals[p];
                    gt.boxes(i, concept).any(|g| iou(&g.region, &r) >= DEFAULT_IOU_THRESHOLD)
                })
                .count()
        };
        total += clean.len();
        let plain = train_part("nose", &data, Some(&dets), None, &cfg).unwrap();
        let example = *clean
            .iter()
            .find(|&&i| set.scenes[i].kind == SceneKind::Object)
            .expect("a whole-object positive");
        for (slot, extent) in extents.iter().enumerate() {
            plain_hits[slot] += hits(&plain, extent);
            let region = gt.boxes(example, extent).next().unwrap().region;
            let spec = ExemplarSpec { image: ds.store.image(example).id.clone(), region, beta: 5.0 };
            let guided = train_part("nose", &data, Some(&dets), Some(&spec), &cfg).unwrap();
            guided_hits[slot] += hits(&guided, extent);
            let off = ExemplarSpec { beta: 0.0, ..spec };
            let neutral = train_part("nose", &data, Some(&dets), Some(&off), &cfg).unwrap();
            identical &= serde_json::to_vec(&neutral).unwrap() == serde_json::to_vec(&plain).unwrap();
        }
    }
    let share = |h: usize| h as f64 / total as f64;
    let guided = [share(guided_hits[0]), share(guided_hits[1])];
    let plain = [share(plain_hits[0]), share(plain_hits[1])];
    let splits = plain.iter().any(|&s| s < 0.9);
    let pass = guided.iter().all(|&s| s >= 0.9) && splits && identical;
    verdict(
        "exemplar extent",
        pass,
        &format!(
            "guided outer {:.2} tip {:.2}; unguided outer {:.2} tip {:.2}; beta=0 identical {identical}",
            guided[0], guided[1], plain[0], plain[1]
        ),
    );
    assert!(pass);
}

/// Exhaustive matcher: every target proposal is scored from the factors
/// `<a, a'> <g, g'>` of the Kronecker inner product, and the library's pick
/// must attain the maximum.
fn oracle_agrees(
    set: &partatlas_core::SyntheticSet,
    dets: &AnchorDetections,
    source: usize,
    region: &Region,
    target: usize,
    variant: MatchVariant,
    overlap: &OverlapConfig,
) -> bool {
    let store = &set.dataset.store;
    let describe = |image: usize, p: usize| {
        let entry = store.image(image);
        let a = entry.descriptors.row_f64(p);
        let g: Vec<f64> = dets.images[image]
            .per_anchor
            .iter()
            .map(|list| {
                list.iter()
                    .filter(|d| d.score > 0.0)
                    .map(|d| rho(&entry.proposals[p], &d.region, overlap) * d.score)
                    .fold(0.0, f64::max)
            })
            .collect();
        (a, g)
    };
    let src_entry = store.image(source);
    let p = (0..src_entry.proposals.len())
        .max_by(|&x, &y| {
            iou(&src_entry.proposals[x], region)
                .total_cmp(&iou(&src_entry.proposals[y], region))
                .then(y.cmp(&x))
        })
        .unwrap();
    let (sa, sg) = describe(source, p);
    let score = |(a, g): &(Vec<f64>, Vec<f64>)| {
        let (aa, gg) = (dot(&sa, a), dot(&sg, g));
        let (na, ng) = (dot(a, a).sqrt(), dot(g, g).sqrt());
        let (sna, sng) = (dot(&sa, &sa).sqrt(), dot(&sg, &sg).sqrt());
        let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
        match variant {
            MatchVariant::Appearance => ratio(aa, na * sna),
            MatchVariant::AnchorG => ratio(gg, ng * sng),
            MatchVariant::AnchorAg => ratio(aa * gg, na * ng * sna * sng),
        }
    };
    let scores: Vec<f64> = (0..store.image(target).proposals.len())
        .map(|q| score(&describe(target, q)))
        .collect();
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let settings = MatchSettings { variant, overlap: *overlap, normalize: true };
    let picked = match_regions(store, Some(dets), source, region, target, &settings).unwrap();
    let q = store.image(target).proposal_index(&picked).unwrap();
    (scores[q] - best).abs() <= 1e-12 * best.abs().max(1.0)
}

#[test]
fn matching_ordering_and_oracle() {
    let mut means = [0.0; 3];
    let (mut agree, mut checked) = (0usize, 0usize);
    let seeds = 3u64;
    for seed in 0..seeds {
        let profile = SyntheticProfile { noise: 0.0, negatives: 40, ..SyntheticProfile::standard(seed) };
        let (set, pairs) = generate_congruent(&profile, 30).unwrap();
        let ds = &set.dataset;
        let gt = set.ground_truth();
        let bank = train_anchors(&ds.anchor_set().unwrap(), &AnchorHyper::desk(seed)).unwrap();
        let dets = detect_all(&bank, &ds.store, &DetectionParams::default()).unwrap();
        for (slot, variant) in MatchVariant::ALL.into_iter().enumerate() {
            let settings = MatchSettings { variant, ..MatchSettings::default() };
            let report = match_benchmark(&ds.store, gt, Some(&dets), &pairs, &settings).unwrap();
            means[slot] += report.mean_iou / seeds as f64;
            for &(s, t) in pairs.iter().take(10) {
                for part in gt.images[s].iter().filter(|b| !b.ignored()) {
                    checked += 1;
                    if oracle_agrees(&set, &dets, s, &part.region, t, variant, &settings.overlap) {
                        agree += 1;
                    }
                }
            }
        }
    }
    let [ag, g, a] = means;
    let pass = ag >= g && g > a && ag >= 0.9 && agree == checked;
    verdict(
        "matching ordering",
        pass,
        &format!("mean IoU anchor-ag {ag:.3}, anchor-g {g:.3}, a {a:.3}; oracle agreement {agree}/{checked}"),
    );
    assert!(pass);
}

/// Brute-force matching outcome of the first `n` ranked detections:
/// `Some(true)` for a hit, `Some(false)` for a miss, `None` when ignored.
fn brute_outcomes(
    ranked: &[(usize, Detection)],
    gt: &GroundTruth,
    concept: &str,
    thr: f64,
) -> Vec<Option<bool>> {
    let mut taken: Vec<(usize, usize)> = Vec::new();
    let mut out = Vec::new();
    for (img, det) in ranked {
        let boxes = &gt.images[*img];
        let candidates = boxes
            .iter()
            .enumerate()
            .filter(|(j, b)| b.concept == concept && !b.ignored() && !taken.contains(&(*img, *j)));
        let mut best: Option<(usize, f64)> = None;
        for (j, b) in candidates {
            let o = iou(&det.region, &b.region);
            if best.is_none() || o > best.unwrap().1 {
                best = Some((j, o));
            }
        }
        match best {
            Some((j, o)) if o >= thr => {
                taken.push((*img, j));
                out.push(Some(true));
            }
            _ => {
                let ignored = boxes
                    .iter()
                    .any(|b| b.concept == concept && b.ignored() && iou(&det.region, &b.region) >= thr);
                out.push(if ignored { None } else { Some(false) });
            }
        }
    }
    out
}

/// AP from confusion counts recomputed from scratch at every cutoff: the
/// interpolated precision at recall `j / P` is the best precision of any
/// counted cutoff with at least `j` hits.
fn brute_ap(dets: &[Vec<Detection>], gt: &GroundTruth, concept: &str, thr: f64) -> Option<f64> {
    let positives = gt
        .images
        .iter()
        .flatten()
        .filter(|b| b.concept == concept && !b.ignored())
        .count();
    if positives == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, usize, Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, l)| l.iter().enumerate().map(move |(r, d)| (i, r, *d)))
        .collect();
    ranked.sort_by(|a, b| {
        b.2.score
            .partial_cmp(&a.2.score)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let ranked: Vec<(usize, Detection)> = ranked.into_iter().map(|(i, _, d)| (i, d)).collect();
    let mut cutoffs: Vec<(usize, f64)> = Vec::new();
    for n in 1..=ranked.len() {
        let outcomes = brute_outcomes(&ranked[..n], gt, concept, thr);
        if outcomes[n - 1].is_none() {
            continue;
        }
        let tp = outcomes.iter().filter(|o| **o == Some(true)).count();
        let fp = outcomes.iter().filter(|o| **o == Some(false)).count();
        cutoffs.push((tp, tp as f64 / (tp + fp) as f64));
    }
    let mut sum = 0.0;
    for j in 1..=positives {
        sum += cutoffs
            .iter()
            .filter(|(tp, _)| *tp >= j)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
    }
    Some(sum / positives as f64)
}

fn brute_corloc(top1: &[(usize, Option<Region>)], gt: &GroundTruth, concept: &str, thr: f64) -> Option<f64> {
    if top1.is_empty() {
        return None;
    }
    let mut hits = 0;
    for (img, r) in top1 {
        if let Some(r) = r {
            if gt.images[*img].iter().any(|b| b.concept == concept && iou(r, &b.region) >= thr) {
                hits += 1;
            }
        }
    }
    Some(hits as f64 / top1.len() as f64)
}

fn random_case(rng: &mut ChaCha8Rng) -> (GroundTruth, Vec<Vec<Detection>>, Vec<(usize, Option<Region>)>) {
    let images = rng.random_range(1..6);
    let mut gt = GroundTruth { vocabulary: vec!["a".into(), "b".into()], images: Vec::new() };
    let mut dets = Vec::new();
    let mut top1 = Vec::new();
    for i in 0..images {
        let boxes: Vec<GtBox> = (0..rng.random_range(0..4))
            .map(|_| GtBox {
                difficult: rng.random_bool(0.15),
                truncated: rng.random_bool(0.15),
                ..GtBox::new(if rng.random_bool(0.7) { "a" } else { "b" }, random_region(rng, 60.0, 5.0, 30.0))
            })
            .collect();
        let list: Vec<Detection> = (0..rng.random_range(0..6))
            .map(|_| {
                let region = match boxes.get(rng.random_range(0..boxes.len() + 1)) {
                    Some(b) => {
                        let j = |rng: &mut ChaCha8Rng| rng.random_range(-4.0..4.0);
                        let (x1, y1) = (b.region.x1() + j(rng), b.region.y1() + j(rng));
                        let (x2, y2) = (b.region.x2() + j(rng), b.region.y2() + j(rng));
                        Region::new(x1, y1, x2.max(x1 + 1.0), y2.max(y1 + 1.0)).unwrap()
                    }
                    None => random_region(rng, 60.0, 5.0, 30.0),
                };
                // Coarse scores force ties across images.
                Detection { region, score: f64::from(rng.random_range(0..8u8)) / 8.0 }
            })
            .collect();
        if rng.random_bool(0.8) {
            top1.push((i, list.first().map(|d| d.region)));
        }
        gt.images.push(boxes);
        dets.push(list);
    }
    (gt, dets, top1)
}

#[test]
fn metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (mut ap_err, mut cl_err, mut mismatched) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..1000 {
        let (gt, dets, top1) = random_case(&mut rng);
        let thr = [0.3, 0.4, 0.5][rng.random_range(0..3)];
        match (average_precision(&dets, &gt, "a", thr), brute_ap(&dets, &gt, "a", thr)) {
            (Ok(x), Some(y)) => ap_err = ap_err.max((x - y).abs()),
            (Err(_), None) => {}
            _ => mismatched += 1,
        }
        match (corloc(&top1, &gt, "a", thr), brute_corloc(&top1, &gt, "a", thr)) {
            (Ok(x), Some(y)) => cl_err = cl_err.max((x - y).abs()),
            (Err(_), None) => {}
            _ => mismatched += 1,
        }
    }

    let set = generate_synthetic(&SyntheticProfile { noise: 0.0, ..SyntheticProfile::standard(16) }).unwrap();
    let gt = set.ground_truth();
    let mut perfect = true;
    for concept in &gt.vocabulary {
        let dets: Vec<Vec<Detection>> = (0..gt.images.len())
            .map(|i| gt.boxes(i, concept).filter(|b| !b.ignored()).map(|b| Detection { region: b.region, score: 1.0 }).collect())
            .collect();
        let top1: Vec<(usize, Option<Region>)> = dets
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, l)| (i, Some(l[0].region)))
            .collect();
        perfect &= average_precision(&dets, gt, concept, DEFAULT_IOU_THRESHOLD).unwrap() == 1.0;
        perfect &= corloc(&top1, gt, concept, DEFAULT_IOU_THRESHOLD).unwrap() == 1.0;
    }

    let pass = ap_err <= 1e-10 && cl_err <= 1e-10 && mismatched == 0 && perfect;
    verdict(
        "metric oracles",
        pass,
        &format!("max AP error {ap_err:.1e}, CorLoc error {cl_err:.1e}, definedness mismatches {mismatched}, perfect detector exact {perfect}"),
    );
    assert!(pass);
}

fn expected_descriptor_bytes(d: &partatlas_core::Descriptors) -> Vec<u8> {
    let mut out = DESCRIPTOR_MAGIC.to_vec();
    for word in [DESCRIPTOR_VERSION, d.rows() as u32, d.cols() as u32] {
        out.extend(word.to_le_bytes());
    }
    for v in d.as_slice() {
        out.extend(v.to_bits().to_le_bytes());
    }
    out
}

fn round_trip<T>(dir: &Path, name: &str, kind: FileKind, value: &T) -> bool
where
    T: serde::Serialize + serde::de::DeserializeOwned + PartialEq,
{
    let path = dir.join(name);
    save_json(&path, kind, value).unwrap();
    load_json::<T>(&path, kind).unwrap() == *value
}

#[test]
fn io_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let profile = SyntheticProfile { images: 40, negatives: 20, ..SyntheticProfile::standard(17) };
    let set = generate_synthetic(&profile).unwrap();
    let ds = &set.dataset;
    let manifest = dir.path().join("scenes.json");
    save_dataset(ds, &manifest).unwrap();
    let dataset_ok = load_dataset(&manifest).unwrap() == *ds;

    let bytes_ok = (0..ds.store.len()).all(|i| {
        let path = dir.path().join("scenes.files").join(format!("{i:06}.amil"));
        std::fs::read(path).unwrap() == expected_descriptor_bytes(&ds.store.image(i).descriptors)
    });

    let hyper = AnchorHyper { iterations: 500, ..AnchorHyper::desk(17) };
    let bank = train_anchors(&ds.anchor_set().unwrap(), &hyper).unwrap();
    let dets = detect_all(&bank, &ds.store, &DetectionParams::default()).unwrap();
    let cfg = MilConfig { appearance_rounds: 2, joint_rounds: 2, seed: 17, ..MilConfig::default() }
        .with_variant(Variant::ContextGeometry);
    let model = train_part("wheel", &ds.weak_set("wheel").unwrap(), Some(&dets), None, &cfg).unwrap();
    let atlas = export_atlas(std::slice::from_ref(&model), &bank, ds, &AtlasParams::default()).unwrap();
    atlas.validate().unwrap();

    let bank_ok = round_trip::<AnchorBank>(dir.path(), "bank.json", FileKind::AnchorBank, &bank);
    let dets_ok = round_trip::<AnchorDetections>(dir.path(), "dets.json", FileKind::AnchorDetections, &dets);
    let model_ok = round_trip::<PartModel>(dir.path(), "model.json", FileKind::PartModel, &model);
    let atlas_ok = round_trip::<AtlasGraph>(dir.path(), "atlas.json", FileKind::Atlas, &atlas);

    let pass = dataset_ok && bytes_ok && bank_ok && dets_ok && model_ok && atlas_ok;
    verdict(
        "I/O round trip",
        pass,
        &format!(
            "dataset {dataset_ok}, descriptor bytes {bytes_ok}, bank {bank_ok}, detections {dets_ok}, model {model_ok}, atlas {atlas_ok} ({} edges)",
            atlas.edges.len()
        ),
    );
    assert!(pass);
}
