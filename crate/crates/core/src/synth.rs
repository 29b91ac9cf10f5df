//! Planted-scene generator.
//!
//! Scenes are built from an object layout: named elements with an
//! appearance pattern and a box in the unit object frame. A proposal's
//! descriptor mixes the patterns of the elements it overlaps, weighted by
//! `c * v` where `c` is the fraction of the proposal covered by the element
//! and `v` the fraction of the element inside the proposal, plus a
//! per-proposal clutter vector for the unexplained remainder and Gaussian
//! noise:
//!
//! ```text
//! phi(R) ~ sum_e c_e v_e p_e + (1 - max_e c_e v_e) n_R + sigma eps_R
//! ```
//!
//! Query images for a concept are object-cropped scenes, zoomed views of
//! the part, or outliers (zoomed views of other parts, or clutter).
//! Negatives are clutter scenes labelled negative for every concept.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    Dataset, DescriptorStore, Descriptors, GroundTruth, GtBox, ImageEntry, ImageMeta, Label,
    LabeledImage,
};
use crate::error::{Error, Result};
use crate::geometry::Region;

/// A planted element in the unit object frame `[0,1] x [0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub name: String,
    pub pattern: String,
    /// `[x1, y1, x2, y2]` in object-frame units.
    pub frame: [f64; 4],
    /// Ground-truth concept, if the element is a semantic part.
    #[serde(default)]
    pub concept: Option<String>,
    /// Surface pattern seen by regions that cover part of the element
    /// without capturing it whole.
    #[serde(default)]
    pub texture: Option<String>,
}

impl Element {
    fn new(name: &str, pattern: &str, frame: [f64; 4], concept: Option<&str>) -> Self {
        Self {
            name: name.into(),
            pattern: pattern.into(),
            frame,
            concept: concept.map(Into::into),
            texture: None,
        }
    }

    fn textured(mut self, texture: &str) -> Self {
        self.texture = Some(texture.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectLayout {
    /// Width over height of the object box.
    pub aspect: f64,
    pub elements: Vec<Element>,
}

impl ObjectLayout {
    /// Side view of a car facing left. Head- and taillight share one
    /// pattern; only the headlight is a named part. The
    /// grille and the rear panel are unnamed patterns.
    pub fn car() -> Self {
        let e = Element::new;
        Self {
            aspect: 2.0,
            elements: vec![
                e("car", "car", [0.0, 0.0, 1.0, 1.0], Some("car")).textured("paint"),
                e("window", "window", [0.30, 0.08, 0.68, 0.38], Some("window")),
                e("door", "door", [0.36, 0.40, 0.62, 0.80], Some("door")),
                e("wheel-front", "wheel", [0.10, 0.62, 0.28, 0.98], Some("wheel")),
                e("wheel-rear", "wheel", [0.72, 0.62, 0.90, 0.98], Some("wheel")),
                e("headlight", "light", [0.01, 0.40, 0.09, 0.52], Some("headlight")),
                e("grille", "grille", [0.01, 0.55, 0.10, 0.66], None),
                e("taillight", "light", [0.91, 0.40, 0.99, 0.52], None),
                e("rear-panel", "rear", [0.90, 0.55, 0.99, 0.66], None),
            ],
        }
    }

    /// Frontal face whose nose has two nested plausible extents: the whole
    /// nose and its tip.
    pub fn face_nested() -> Self {
        let e = Element::new;
        Self {
            aspect: 0.8,
            elements: vec![
                e("face", "face", [0.0, 0.0, 1.0, 1.0], Some("face")).textured("skin"),
                e("eye-left", "eye", [0.18, 0.28, 0.40, 0.38], Some("eye")),
                e("eye-right", "eye", [0.60, 0.28, 0.82, 0.38], Some("eye")),
                e("brow-left", "brow", [0.16, 0.20, 0.42, 0.25], None),
                e("brow-right", "brow", [0.58, 0.20, 0.84, 0.25], None),
                e("nose", "nose", [0.38, 0.32, 0.62, 0.68], Some("nose")),
                e("nose-tip", "nose-tip", [0.44, 0.54, 0.56, 0.66], Some("nose-tip")),
                e("mouth", "mouth", [0.30, 0.76, 0.70, 0.88], Some("mouth")),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.aspect > 0.0) {
            return Err(Error::Config("layout aspect must be positive".into()));
        }
        let mut names = BTreeSet::new();
        for el in &self.elements {
            let [x1, y1, x2, y2] = el.frame;
            let inside = (0.0..=1.0).contains(&x1)
                && (0.0..=1.0).contains(&y1)
                && (0.0..=1.0).contains(&x2)
                && (0.0..=1.0).contains(&y2);
            if !(inside && x2 > x1 && y2 > y1) {
                return Err(Error::Config(format!(
                    "element `{}` does not fit inside the object frame",
                    el.name
                )));
            }
            if !names.insert(el.name.as_str()) {
                return Err(Error::Config(format!("duplicate element `{}`", el.name)));
            }
        }
        Ok(())
    }

    fn patterns(&self) -> BTreeSet<&str> {
        self.elements
            .iter()
            .flat_map(|e| std::iter::once(e.pattern.as_str()).chain(e.texture.as_deref()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticProfile {
    pub layout: ObjectLayout,
    /// Concepts images are queried for; each must name a layout element.
    pub concepts: Vec<String>,
    /// Query images in total, split evenly across concepts.
    pub images: usize,
    /// Clutter-only negative images.
    pub negatives: usize,
    /// Range of image widths in pixels; its ratio is the scale jitter.
    pub width_range: (f64, f64),
    pub outlier_fraction: f64,
    /// Chance that a clean part query shows the whole object rather than a
    /// zoomed view of the part.
    pub object_fraction: f64,
    /// Side multiplier of the crop around a zoomed part.
    pub zoom_range: (f64, f64),
    /// Norm of the additive descriptor noise.
    pub noise: f64,
    /// Random proposals per image.
    pub distractors: usize,
    /// Jittered near-miss proposals per element.
    pub near_misses: usize,
    /// Mirror scenes horizontally at random.
    pub flip: bool,
    /// Strength of element surface textures relative to their patterns.
    pub texture: f64,
    pub dim: usize,
    /// Distinct background patterns used by clutter scenes.
    pub clutter_patterns: usize,
    pub seed: u64,
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        Self::standard(0)
    }
}

impl SyntheticProfile {
    /// Car parts, 200 query images, 20% outliers, 2x scale jitter.
    pub fn standard(seed: u64) -> Self {
        Self {
            layout: ObjectLayout::car(),
            concepts: ["car", "wheel", "window", "door", "headlight"]
                .map(String::from)
                .to_vec(),
            images: 200,
            negatives: 100,
            width_range: (96.0, 192.0),
            outlier_fraction: 0.2,
            object_fraction: 0.3,
            zoom_range: (1.3, 2.5),
            noise: 0.3,
            distractors: 10,
            near_misses: 1,
            flip: true,
            texture: 0.2,
            dim: 64,
            clutter_patterns: 24,
            seed,
        }
    }

    /// Face parts with the nested nose extents; queries are for `nose` only
    /// besides the face itself.
    pub fn nested(seed: u64) -> Self {
        Self {
            layout: ObjectLayout::face_nested(),
            concepts: ["face", "eye", "nose", "mouth"].map(String::from).to_vec(),
            images: 160,
            negatives: 80,
            flip: false,
            ..Self::standard(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad(format!(
                "outlier fraction must lie in [0, 1), got {}",
                self.outlier_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.object_fraction) {
            return bad("object fraction must lie in [0, 1]".into());
        }
        let (w0, w1) = self.width_range;
        if !(w0 > 0.0 && w1 >= w0) {
            return bad("invalid width range".into());
        }
        let (z0, z1) = self.zoom_range;
        if !(z0 > 1.0 && z1 >= z0) {
            return bad("zoom range must exceed 1".into());
        }
        if self.dim < 2 || self.noise < 0.0 {
            return bad("descriptor dimension must be >= 2 and noise >= 0".into());
        }
        if self.concepts.is_empty() {
            return bad("at least one concept is required".into());
        }
        for c in &self.concepts {
            if !self.layout.elements.iter().any(|e| e.concept.as_deref() == Some(c)) {
                return bad(format!("concept `{c}` has no layout element"));
            }
        }
        if self.negatives == 0 || self.images < self.concepts.len() {
            return bad("need negatives and at least one image per concept".into());
        }
        if self.clutter_patterns == 0 {
            return bad("need at least one clutter pattern".into());
        }
        Ok(())
    }

    fn object_concept(&self) -> Option<&str> {
        self.layout
            .elements
            .iter()
            .find(|e| e.frame == [0.0, 0.0, 1.0, 1.0])
            .and_then(|e| e.concept.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneKind {
    Object,
    Zoomed { element: String },
    Clutter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub kind: SceneKind,
    /// Concept the image was collected for; `None` for negatives.
    pub query: Option<String>,
    /// Collected for `query` but does not show it.
    pub outlier: bool,
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub dataset: Dataset,
    pub scenes: Vec<SceneInfo>,
    /// Unit appearance pattern of every layout and clutter pattern name.
    pub patterns: BTreeMap<String, Vec<f64>>,
}

impl SyntheticSet {
    /// Query images of `concept` that really show it.
    pub fn clean_positives(&self, concept: &str) -> Vec<usize> {
        self.scenes
            .iter()
            .enumerate()
            .filter(|(_, s)| s.query.as_deref() == Some(concept) && !s.outlier)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn ground_truth(&self) -> &GroundTruth {
        self.dataset
            .ground_truth
            .as_ref()
            .expect("synthetic sets carry ground truth")
    }
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::linalg::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random unit patterns keyed by name.
fn pattern_bank(names: &[String], dim: usize, seed: u64) -> BTreeMap<String, Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    names
        .iter()
        .map(|n| (n.clone(), gaussian_unit(&mut rng, dim)))
        .collect()
}

/// An element placed in image coordinates. `full` may extend past the
/// image; `visible` is its clipped part.
#[derive(Debug, Clone)]
struct Placed {
    element: usize,
    full: Region,
    visible: Option<Region>,
}

impl Placed {
    fn visible_fraction(&self) -> f64 {
        self.visible.map_or(0.0, |v| v.area() / self.full.area())
    }
}

/// A rendered scene before descriptors are drawn.
#[derive(Debug, Clone)]
struct Scene {
    width: f64,
    height: f64,
    placed: Vec<Placed>,
    /// Pattern names, parallel to `placed`.
    patterns: Vec<String>,
    /// Surface pattern names, parallel to `placed`.
    textures: Vec<Option<String>>,
}

fn frame_region(frame: [f64; 4], flip: bool, aspect: f64) -> [f64; 4] {
    let [x1, y1, x2, y2] = frame;
    let (x1, x2) = if flip { (1.0 - x2, 1.0 - x1) } else { (x1, x2) };
    [x1 * aspect, y1, x2 * aspect, y2]
}

/// Places the layout so that the world window `crop` maps onto an image of
/// width `width`.
fn render(layout: &ObjectLayout, flip: bool, crop: [f64; 4], width: f64) -> Result<Scene> {
    let scale = width / (crop[2] - crop[0]);
    let height = (crop[3] - crop[1]) * scale;
    let bounds = Region::new(0.0, 0.0, width, height)?;
    let mut placed = Vec::new();
    let mut patterns = Vec::new();
    let mut textures = Vec::new();
    for (i, el) in layout.elements.iter().enumerate() {
        let [x1, y1, x2, y2] = frame_region(el.frame, flip, layout.aspect);
        let full = Region::new(
            (x1 - crop[0]) * scale,
            (y1 - crop[1]) * scale,
            (x2 - crop[0]) * scale,
            (y2 - crop[1]) * scale,
        )?;
        placed.push(Placed {
            element: i,
            full,
            visible: full.intersection(&bounds),
        });
        patterns.push(el.pattern.clone());
        textures.push(el.texture.clone());
    }
    Ok(Scene {
        width,
        height,
        placed,
        patterns,
        textures,
    })
}

fn clutter_scene(profile: &SyntheticProfile, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let width = rng.random_range(profile.width_range.0..=profile.width_range.1);
    let height = width * rng.random_range(0.5..1.0);
    let count = rng.random_range(3..=6);
    let mut placed = Vec::new();
    let mut patterns = Vec::new();
    for i in 0..count {
        let w = width * rng.random_range(0.15..0.5);
        let h = height * rng.random_range(0.15..0.5);
        let x = rng.random_range(0.0..width - w);
        let y = rng.random_range(0.0..height - h);
        let full = Region::new(x, y, x + w, y + h)?;
        placed.push(Placed {
            element: i,
            full,
            visible: Some(full),
        });
        patterns.push(format!("clutter-{}", rng.random_range(0..profile.clutter_patterns)));
    }
    Ok(Scene {
        width,
        height,
        textures: vec![None; placed.len()],
        placed,
        patterns,
    })
}

fn clamp_box(x1: f64, y1: f64, x2: f64, y2: f64, w: f64, h: f64) -> Option<Region> {
    let (x1, y1, x2, y2) = (x1.max(0.0), y1.max(0.0), x2.min(w), y2.min(h));
    (x2 - x1 > 1e-3 && y2 - y1 > 1e-3)
        .then(|| Region::new(x1, y1, x2, y2).ok())
        .flatten()
}

fn proposals(
    scene: &Scene,
    profile: &SyntheticProfile,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Region>> {
    let (w, h) = (scene.width, scene.height);
    let mut out: Vec<Region> = vec![Region::new(0.0, 0.0, w, h)?];
    for p in &scene.placed {
        if p.visible_fraction() < 0.3 {
            continue;
        }
        let v = p.visible.expect("visible");
        out.push(v);
        if let Ok(ctx) = crate::embeddings::context_region(&v, 2.0, w, h) {
            out.push(ctx);
        }
        for _ in 0..profile.near_misses {
            let (cx, cy) = v.center();
            let s = rng.random_range(0.75..1.3);
            let dx = v.width() * rng.random_range(-0.25..0.25);
            let dy = v.height() * rng.random_range(-0.25..0.25);
            let (hw, hh) = (v.width() * s / 2.0, v.height() * s / 2.0);
            if let Some(r) = clamp_box(cx + dx - hw, cy + dy - hh, cx + dx + hw, cy + dy + hh, w, h) {
                out.push(r);
            }
        }
    }
    for _ in 0..profile.distractors {
        let bw = w * rng.random_range(0.08..0.6);
        let bh = h * rng.random_range(0.08..0.6);
        let x = rng.random_range(0.0..w - bw);
        let y = rng.random_range(0.0..h - bh);
        out.push(Region::new(x, y, x + bw, y + bh)?);
    }
    let mut seen = BTreeSet::new();
    out.retain(|r| seen.insert(r.to_array().map(f64::to_bits)));
    out.shuffle(rng);
    Ok(out)
}

/// Noise-free part of a proposal's descriptor and the share of the
/// proposal it explains. Each element adds `c v p_e`; a textured element
/// also adds `c (1 - v) t_e` for the surface it shows without being
/// captured whole.
fn planted_mix(
    r: &Region,
    scene: &Scene,
    patterns: &BTreeMap<String, Vec<f64>>,
    dim: usize,
    texture: f64,
) -> (Vec<f64>, f64) {
    let mut v = vec![0.0; dim];
    let mut best: f64 = 0.0;
    let mut surface: f64 = 0.0;
    let mut add = |weight: f64, pattern: &[f64]| {
        for (a, b) in v.iter_mut().zip(pattern) {
            *a += weight * b;
        }
    };
    for ((p, name), surface_pattern) in scene.placed.iter().zip(&scene.patterns).zip(&scene.textures) {
        let inter = r.intersection_area(&p.full);
        if inter <= 0.0 {
            continue;
        }
        let (c, vis) = (inter / r.area(), inter / p.full.area());
        best = best.max(c * vis);
        add(c * vis, &patterns[name]);
        if let Some(t) = surface_pattern {
            let w = texture * c * (1.0 - vis);
            surface = surface.max(w);
            add(w, &patterns[t]);
        }
    }
    (v, (best + surface).min(1.0))
}

/// Per-proposal random terms, kept so congruent copies can reuse them.
#[derive(Debug, Clone)]
struct ProposalNoise {
    clutter: Vec<f64>,
    noise: Vec<f64>,
}

fn draw_noise(rng: &mut ChaCha8Rng, dim: usize, sigma: f64) -> ProposalNoise {
    let clutter = gaussian_unit(rng, dim);
    let noise = (0..dim)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal) / (dim as f64).sqrt())
        .collect();
    ProposalNoise { clutter, noise }
}

fn describe(
    boxes: &[Region],
    scene: &Scene,
    patterns: &BTreeMap<String, Vec<f64>>,
    noise: &[ProposalNoise],
    dim: usize,
    texture: f64,
) -> Result<Descriptors> {
    let rows: Vec<Vec<f64>> = boxes
        .iter()
        .zip(noise)
        .map(|(r, pn)| {
            let (mut v, best) = planted_mix(r, scene, patterns, dim, texture);
            let rest = (1.0 - best).max(0.0);
            for ((a, c), n) in v.iter_mut().zip(&pn.clutter).zip(&pn.noise) {
                *a += rest * c + n;
            }
            crate::linalg::normalized(&v)
        })
        .collect();
    Descriptors::from_rows(dim, &rows)
}

fn ground_truth(scene: &Scene, layout: &ObjectLayout) -> Vec<GtBox> {
    scene
        .placed
        .iter()
        .filter_map(|p| {
            let concept = layout.elements.get(p.element)?.concept.as_ref()?;
            let frac = p.visible_fraction();
            (frac >= 0.5).then(|| GtBox {
                truncated: frac < 0.9,
                ..GtBox::new(concept.clone(), p.visible.expect("visible"))
            })
        })
        .collect()
}

fn object_crop(layout: &ObjectLayout, rng: &mut ChaCha8Rng) -> [f64; 4] {
    let m = rng.random_range(0.03..0.08);
    [-m * layout.aspect, -m, layout.aspect * (1.0 + m), 1.0 + m]
}

fn zoom_crop(el: [f64; 4], zoom: f64, rng: &mut ChaCha8Rng) -> [f64; 4] {
    let (w, h) = (el[2] - el[0], el[3] - el[1]);
    let (cw, ch) = (w * zoom, h * zoom);
    let slack_x = (cw - w) / 2.0 * 0.5;
    let slack_y = (ch - h) / 2.0 * 0.5;
    let cx = (el[0] + el[2]) / 2.0 + rng.random_range(-slack_x..=slack_x);
    let cy = (el[1] + el[3]) / 2.0 + rng.random_range(-slack_y..=slack_y);
    [cx - cw / 2.0, cy - ch / 2.0, cx + cw / 2.0, cy + ch / 2.0]
}

struct Built {
    entry: ImageEntry,
    gt: Vec<GtBox>,
    info: SceneInfo,
    scene: Scene,
    noise: Vec<ProposalNoise>,
}

fn build_image(
    id: String,
    scene: Scene,
    info: SceneInfo,
    profile: &SyntheticProfile,
    patterns: &BTreeMap<String, Vec<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<Built> {
    let boxes = proposals(&scene, profile, rng)?;
    let noise: Vec<ProposalNoise> = boxes
        .iter()
        .map(|_| draw_noise(rng, profile.dim, profile.noise))
        .collect();
    let descriptors = describe(&boxes, &scene, patterns, &noise, profile.dim, profile.texture)?;
    let gt = if matches!(info.kind, SceneKind::Clutter) {
        Vec::new()
    } else {
        ground_truth(&scene, &profile.layout)
    };
    Ok(Built {
        entry: ImageEntry {
            id,
            width: scene.width,
            height: scene.height,
            proposals: boxes,
            descriptors,
        },
        gt,
        info,
        scene,
        noise,
    })
}

fn all_patterns(profile: &SyntheticProfile) -> Vec<String> {
    let mut names: Vec<String> = profile.layout.patterns().into_iter().map(String::from).collect();
    names.extend((0..profile.clutter_patterns).map(|i| format!("clutter-{i}")));
    names
}

fn gt_vocabulary(layout: &ObjectLayout) -> Vec<String> {
    let mut v: Vec<String> = Vec::new();
    for c in layout.elements.iter().filter_map(|e| e.concept.clone()) {
        if !v.contains(&c) {
            v.push(c);
        }
    }
    v
}

fn query_scene(
    profile: &SyntheticProfile,
    concept: &str,
    rng: &mut ChaCha8Rng,
) -> Result<(Scene, SceneInfo)> {
    let layout = &profile.layout;
    let flip = profile.flip && rng.random_bool(0.5);
    let width = rng.random_range(profile.width_range.0..=profile.width_range.1);
    let outlier = rng.random_bool(profile.outlier_fraction);
    let is_object = profile.object_concept() == Some(concept);
    let zoom_on = |name_filter: &dyn Fn(&Element) -> bool, rng: &mut ChaCha8Rng| {
        let options: Vec<&Element> = layout.elements.iter().filter(|e| name_filter(e)).collect();
        options.choose(rng).map(|e| (*e).clone())
    };

    let (kind, crop) = if outlier {
        // Another part seen up close, or plain clutter.
        let other = zoom_on(
            &|e: &Element| {
                e.concept.as_deref().is_some_and(|c| c != concept)
                    && e.frame != [0.0, 0.0, 1.0, 1.0]
                    && !overlaps_concept(layout, e, concept)
            },
            rng,
        );
        match other {
            Some(el) if rng.random_bool(0.5) => {
                let zoom = rng.random_range(profile.zoom_range.0..=profile.zoom_range.1);
                let f = frame_region(el.frame, flip, layout.aspect);
                (SceneKind::Zoomed { element: el.name }, Some(zoom_crop(f, zoom, rng)))
            }
            _ => (SceneKind::Clutter, None),
        }
    } else if is_object || rng.random_bool(profile.object_fraction) {
        (SceneKind::Object, Some(object_crop(layout, rng)))
    } else {
        let el = zoom_on(&|e: &Element| e.concept.as_deref() == Some(concept), rng)
            .expect("validated concept");
        let zoom = rng.random_range(profile.zoom_range.0..=profile.zoom_range.1);
        let f = frame_region(el.frame, flip, layout.aspect);
        (SceneKind::Zoomed { element: el.name }, Some(zoom_crop(f, zoom, rng)))
    };
    let scene = match crop {
        Some(c) => render(layout, flip, c, width)?,
        None => clutter_scene(profile, rng)?,
    };
    Ok((
        scene,
        SceneInfo {
            kind,
            query: Some(concept.to_string()),
            outlier,
            flipped: flip,
        },
    ))
}

/// True when zooming on `el` would still show most of a `concept` element.
fn overlaps_concept(layout: &ObjectLayout, el: &Element, concept: &str) -> bool {
    let [a1, b1, a2, b2] = el.frame;
    layout
        .elements
        .iter()
        .filter(|o| o.concept.as_deref() == Some(concept))
        .any(|o| {
            let [c1, d1, c2, d2] = o.frame;
            let iw = (a2.min(c2) - a1.max(c1)).max(0.0);
            let ih = (b2.min(d2) - b1.max(d1)).max(0.0);
            iw * ih > 0.0
        })
}

fn assemble(
    profile: &SyntheticProfile,
    built: Vec<Built>,
    patterns: BTreeMap<String, Vec<f64>>,
) -> Result<SyntheticSet> {
    let mut store = DescriptorStore::new(profile.dim);
    let mut meta = Vec::new();
    let mut gt_images = Vec::new();
    let mut scenes = Vec::new();
    for b in built {
        let labels = match &b.info.query {
            Some(c) => BTreeMap::from([(c.clone(), Label::Positive)]),
            None => profile
                .concepts
                .iter()
                .map(|c| (c.clone(), Label::Negative))
                .collect(),
        };
        store.push(b.entry)?;
        meta.push(ImageMeta { uri: None, labels });
        gt_images.push(b.gt);
        scenes.push(b.info);
    }
    Ok(SyntheticSet {
        dataset: Dataset {
            vocabulary: profile.concepts.clone(),
            store,
            meta,
            ground_truth: Some(GroundTruth {
                vocabulary: gt_vocabulary(&profile.layout),
                images: gt_images,
            }),
        },
        scenes,
        patterns,
    })
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn negative(
    profile: &SyntheticProfile,
    patterns: &BTreeMap<String, Vec<f64>>,
    index: usize,
) -> Result<Built> {
    let mut rng = image_rng(profile.seed, index);
    let scene = clutter_scene(profile, &mut rng)?;
    let info = SceneInfo {
        kind: SceneKind::Clutter,
        query: None,
        outlier: false,
        flipped: false,
    };
    build_image(format!("img{index:05}"), scene, info, profile, patterns, &mut rng)
}

/// Generates a weakly labelled query set. Deterministic in the seed.
pub fn generate_synthetic(profile: &SyntheticProfile) -> Result<SyntheticSet> {
    profile.validate()?;
    let patterns = pattern_bank(&all_patterns(profile), profile.dim, profile.seed);
    let per = profile.images / profile.concepts.len();
    let extra = profile.images % profile.concepts.len();
    let mut built = Vec::new();
    let mut index = 0;
    for (ci, concept) in profile.concepts.iter().enumerate() {
        for _ in 0..per + usize::from(ci < extra) {
            let mut rng = image_rng(profile.seed, index);
            let (scene, info) = query_scene(profile, concept, &mut rng)?;
            built.push(build_image(
                format!("img{index:05}"),
                scene,
                info,
                profile,
                &patterns,
                &mut rng,
            )?);
            index += 1;
        }
    }
    for _ in 0..profile.negatives {
        built.push(negative(profile, &patterns, index)?);
        index += 1;
    }
    assemble(profile, built, patterns)
}

/// Object scenes in congruent pairs: the second image of each pair is the
/// first under a random similarity transform (scale in `[0.5, 2]`, new
/// margins) with the same proposals, clutter and noise. Returns the set
/// and the `(source, target)` pairs.
pub fn generate_congruent(
    profile: &SyntheticProfile,
    pairs: usize,
) -> Result<(SyntheticSet, Vec<(usize, usize)>)> {
    profile.validate()?;
    let patterns = pattern_bank(&all_patterns(profile), profile.dim, profile.seed);
    let mut built = Vec::new();
    let mut out_pairs = Vec::new();
    let mut index = 0;
    for _ in 0..pairs {
        let mut rng = image_rng(profile.seed, index);
        let flip = profile.flip && rng.random_bool(0.5);
        let width = rng.random_range(profile.width_range.0..=profile.width_range.1);
        let crop = object_crop(&profile.layout, &mut rng);
        let scene = render(&profile.layout, flip, crop, width)?;
        let info = SceneInfo {
            kind: SceneKind::Object,
            query: profile.object_concept().map(String::from),
            outlier: false,
            flipped: flip,
        };
        let src = build_image(
            format!("img{index:05}"),
            scene,
            info.clone(),
            profile,
            &patterns,
            &mut rng,
        )?;

        let s = rng.random_range(0.5..2.0);
        let pad_x = rng.random_range(0.0..20.0);
        let pad_y = rng.random_range(0.0..20.0);
        let (w, h) = (src.scene.width * s + pad_x * 2.0, src.scene.height * s + pad_y * 2.0);
        let map = |r: &Region| r.similarity(s, pad_x, pad_y);
        let mut scene2 = src.scene.clone();
        scene2.width = w;
        scene2.height = h;
        for p in &mut scene2.placed {
            p.full = map(&p.full)?;
            p.visible = p.visible.map(|v| map(&v)).transpose()?;
        }
        let boxes = src
            .entry
            .proposals
            .iter()
            .map(map)
            .collect::<Result<Vec<_>>>()?;
        let descriptors = describe(&boxes, &scene2, &patterns, &src.noise, profile.dim, profile.texture)?;
        let gt = src
            .gt
            .iter()
            .map(|g| Ok(GtBox { region: map(&g.region)?, ..g.clone() }))
            .collect::<Result<Vec<_>>>()?;
        let dst = Built {
            entry: ImageEntry {
                id: format!("img{:05}", index + 1),
                width: w,
                height: h,
                proposals: boxes,
                descriptors,
            },
            gt,
            info,
            scene: scene2,
            noise: src.noise.clone(),
        };
        out_pairs.push((index, index + 1));
        built.push(src);
        built.push(dst);
        index += 2;
    }
    for _ in 0..profile.negatives {
        built.push(negative(profile, &patterns, index)?);
        index += 1;
    }
    Ok((assemble(profile, built, patterns)?, out_pairs))
}

/// A minimal planted MIL problem: every clean positive holds one proposal
/// showing the part pattern; outlier positives and negatives hold clutter
/// only.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSet {
    pub store: DescriptorStore,
    pub items: Vec<LabeledImage>,
    pub ground_truth: GroundTruth,
    /// Parallel to the store: positive images without the part.
    pub outlier: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedProfile {
    pub positives: usize,
    pub negatives: usize,
    pub proposals: usize,
    pub dim: usize,
    pub noise: f64,
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl Default for PlantedProfile {
    fn default() -> Self {
        Self {
            positives: 30,
            negatives: 30,
            proposals: 8,
            dim: 16,
            noise: 0.1,
            outlier_fraction: 0.0,
            seed: 0,
        }
    }
}

/// Planted part at a random position among random boxes. Proposal 0 of
/// every image covers the whole image and weakly carries the part pattern.
pub fn generate_planted(p: &PlantedProfile) -> Result<PlantedSet> {
    if p.positives == 0 || p.negatives == 0 || p.proposals < 3 || p.dim < 2 {
        return Err(Error::Config("planted set needs >= 3 proposals and both labels".into()));
    }
    if !(0.0..1.0).contains(&p.outlier_fraction) {
        return Err(Error::Config("outlier fraction must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let part = gaussian_unit(&mut rng, p.dim);
    let mut store = DescriptorStore::new(p.dim);
    let mut items = Vec::new();
    let mut gt = Vec::new();
    let mut outlier = Vec::new();
    let noisy = |base: &[f64], rng: &mut ChaCha8Rng| {
        let n = gaussian_unit(rng, p.dim);
        crate::linalg::normalized(
            &base
                .iter()
                .zip(&n)
                .map(|(a, b)| a + p.noise * b)
                .collect::<Vec<_>>(),
        )
    };
    for i in 0..p.positives + p.negatives {
        let positive = i < p.positives;
        let is_outlier = positive && rng.random_bool(p.outlier_fraction);
        let has_part = positive && !is_outlier;
        let (w, h) = (100.0, 100.0);
        let mut boxes = vec![Region::new(0.0, 0.0, w, h)?];
        let mut rows = Vec::new();
        let whole_clutter = gaussian_unit(&mut rng, p.dim);
        let whole: Vec<f64> = if has_part {
            whole_clutter.iter().zip(&part).map(|(c, a)| c + 0.5 * a).collect()
        } else {
            whole_clutter
        };
        rows.push(noisy(&whole, &mut rng));
        let slot = rng.random_range(1..p.proposals);
        let mut part_box = None;
        for k in 1..p.proposals {
            let bw = rng.random_range(10.0..40.0);
            let bh = rng.random_range(10.0..40.0);
            let x = rng.random_range(0.0..w - bw);
            let y = rng.random_range(0.0..h - bh);
            let r = Region::new(x, y, x + bw, y + bh)?;
            boxes.push(r);
            if has_part && k == slot {
                rows.push(noisy(&part, &mut rng));
                part_box = Some(r);
            } else {
                rows.push(gaussian_unit(&mut rng, p.dim));
            }
        }
        let entry = ImageEntry {
            id: format!("p{i:04}"),
            width: w,
            height: h,
            proposals: boxes,
            descriptors: Descriptors::from_rows(p.dim, &rows)?,
        };
        let idx = store.push(entry)?;
        items.push(LabeledImage {
            image: idx,
            label: if positive { Label::Positive } else { Label::Negative },
        });
        gt.push(part_box.map(|r| vec![GtBox::new("part", r)]).unwrap_or_default());
        outlier.push(is_outlier);
    }
    Ok(PlantedSet {
        store,
        items,
        ground_truth: GroundTruth {
            vocabulary: vec!["part".into()],
            images: gt,
        },
        outlier,
    })
}

/// Anchor diversity set: pattern `A` appears in every positive, pattern `B`
/// in a share of positives and a smaller share of negatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoPatternProfile {
    pub positives: usize,
    pub negatives: usize,
    pub b_in_positives: f64,
    pub b_in_negatives: f64,
    pub clutter: usize,
    pub dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for TwoPatternProfile {
    fn default() -> Self {
        Self {
            positives: 40,
            negatives: 40,
            b_in_positives: 0.6,
            b_in_negatives: 0.1,
            clutter: 6,
            dim: 32,
            noise: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoPatternSet {
    pub store: DescriptorStore,
    pub items: Vec<LabeledImage>,
    pub pattern_a: Vec<f64>,
    pub pattern_b: Vec<f64>,
    /// Store index and proposal of every planted `A` and `B`.
    pub a_at: Vec<(usize, usize)>,
    pub b_at: Vec<(usize, usize)>,
}

pub fn generate_two_pattern(p: &TwoPatternProfile) -> Result<TwoPatternSet> {
    if p.positives == 0 || p.negatives == 0 || p.dim < 2 {
        return Err(Error::Config("two-pattern set needs both labels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let a = gaussian_unit(&mut rng, p.dim);
    let b = gaussian_unit(&mut rng, p.dim);
    let mut store = DescriptorStore::new(p.dim);
    let mut items = Vec::new();
    let (mut a_at, mut b_at) = (Vec::new(), Vec::new());
    for i in 0..p.positives + p.negatives {
        let positive = i < p.positives;
        let share = if positive { p.b_in_positives } else { p.b_in_negatives };
        let mut rows: Vec<(Vec<f64>, u8)> = (0..p.clutter)
            .map(|_| (gaussian_unit(&mut rng, p.dim), 0))
            .collect();
        if positive {
            rows.push((a.clone(), 1));
        }
        if rng.random_bool(share) {
            rows.push((b.clone(), 2));
        }
        rows.shuffle(&mut rng);
        let mut boxes = Vec::new();
        let mut data = Vec::new();
        for (k, (base, tag)) in rows.iter().enumerate() {
            let x = 12.0 * k as f64;
            boxes.push(Region::new(x, 0.0, x + 10.0, 10.0)?);
            let n = gaussian_unit(&mut rng, p.dim);
            data.push(crate::linalg::normalized(
                &base.iter().zip(&n).map(|(u, v)| u + p.noise * v).collect::<Vec<_>>(),
            ));
            match tag {
                1 => a_at.push((i, k)),
                2 => b_at.push((i, k)),
                _ => {}
            }
        }
        let idx = store.push(ImageEntry {
            id: format!("t{i:04}"),
            width: 12.0 * rows.len() as f64,
            height: 10.0,
            proposals: boxes,
            descriptors: Descriptors::from_rows(p.dim, &data)?,
        })?;
        items.push(LabeledImage {
            image: idx,
            label: if positive { Label::Positive } else { Label::Negative },
        });
    }
    Ok(TwoPatternSet {
        store,
        items,
        pattern_a: a,
        pattern_b: b,
        a_at,
        b_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;

    fn small(seed: u64) -> SyntheticProfile {
        SyntheticProfile {
            images: 25,
            negatives: 5,
            ..SyntheticProfile::standard(seed)
        }
    }

    #[test]
    fn layouts_are_valid() {
        ObjectLayout::car().validate().unwrap();
        ObjectLayout::face_nested().validate().unwrap();
        SyntheticProfile::standard(0).validate().unwrap();
        SyntheticProfile::nested(0).validate().unwrap();
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_synthetic(&small(4)).unwrap();
        let b = generate_synthetic(&small(4)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(5)).unwrap();
        assert_ne!(a.dataset.store, c.dataset.store);
    }

    #[test]
    fn clean_positives_have_exact_proposal() {
        let p = SyntheticProfile {
            outlier_fraction: 0.0,
            ..small(1)
        };
        let set = generate_synthetic(&p).unwrap();
        let gt = set.ground_truth();
        for c in &p.concepts {
            for i in set.clean_positives(c) {
                let entry = set.dataset.store.image(i);
                let any = gt
                    .boxes(i, c)
                    .any(|g| entry.proposals.iter().any(|q| iou(q, &g.region) == 1.0));
                assert!(any, "image {i} concept {c}");
            }
        }
    }

    #[test]
    fn noise_free_patterns_repeat() {
        let p = SyntheticProfile {
            noise: 0.0,
            outlier_fraction: 0.0,
            object_fraction: 1.0,
            flip: false,
            ..small(2)
        };
        let set = generate_synthetic(&p).unwrap();
        let store = &set.dataset.store;
        let gt = set.ground_truth();
        // The window box explains itself fully in every object scene, so
        // its descriptor is the same everywhere.
        let rows: Vec<Vec<f32>> = (0..store.len())
            .filter(|&i| set.scenes[i].kind == SceneKind::Object)
            .filter_map(|i| {
                let g = gt.boxes(i, "window").next()?;
                let p = store.image(i).proposal_index(&g.region)?;
                Some(store.image(i).descriptors.row(p).to_vec())
            })
            .collect();
        assert!(rows.len() > 3);
        for r in &rows[1..] {
            for (a, b) in r.iter().zip(&rows[0]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn congruent_pairs_share_descriptors() {
        let p = SyntheticProfile {
            noise: 0.0,
            negatives: 3,
            ..SyntheticProfile::standard(3)
        };
        let (set, pairs) = generate_congruent(&p, 3).unwrap();
        let store = &set.dataset.store;
        for (s, t) in pairs {
            assert_eq!(store.image(s).descriptors, store.image(t).descriptors);
        }
    }

    #[test]
    fn rejects_infeasible_layout() {
        let mut p = small(0);
        p.layout.elements[1].frame = [0.5, 0.5, 1.2, 0.9];
        assert!(matches!(generate_synthetic(&p), Err(Error::Config(_))));
        let p = SyntheticProfile {
            outlier_fraction: 1.0,
            ..small(0)
        };
        assert!(matches!(generate_synthetic(&p), Err(Error::Config(_))));
    }
}
