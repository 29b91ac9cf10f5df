//! One function per verb.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use partatlas_core::anchors::{detect_all, train_anchors};
use partatlas_core::eval::grid::{grid_encode, GRID_CELLS};
use partatlas_core::eval::{
    evaluate_part, lambda_search, match_benchmark, match_regions, LAMBDA_GRID,
};
use partatlas_core::io::{load_json, save_json, to_json};
use partatlas_core::mil::train_part;
use partatlas_core::{
    export_atlas, generate_congruent, generate_synthetic, load_dataset, save_dataset, AnchorBank,
    AnchorDetections, Dataset, Detection, Error, EvalReport, ExemplarSpec, FileKind, PartModel,
    Region, SyntheticProfile, Variant,
};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::repro::RunRecord;
use crate::{AnchorSource, Cli, Command, Preset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairsFile {
    /// `(source, target)` image ids.
    pub pairs: Vec<(String, String)>,
}

#[derive(Debug, Serialize)]
struct ImageReport {
    image: String,
    detections: Vec<Detection>,
}

#[derive(Debug, Serialize)]
struct DetectionReport {
    concept: String,
    variant: Variant,
    images: Vec<ImageReport>,
}

#[derive(Debug, Serialize)]
struct GridCode {
    image: String,
    code: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct GridReport {
    anchors: usize,
    cells: usize,
    images: Vec<GridCode>,
}

#[derive(Debug, Serialize)]
struct MatchAnswer {
    target: String,
    #[serde(rename = "box")]
    region: Region,
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let config = RunConfig::load(cli.config.as_deref())?.with_seed(cli.seed);
    let out = cli.out.as_deref();
    let name = verb(&cli.command);
    match &cli.command {
        Command::Synth(a) => synth(a, &config, cli.seed, required(out, name)?)?,
        Command::TrainAnchors { data } => {
            let ds = load_dataset(data)?;
            let bank = train_anchors(&ds.anchor_set()?, &config.anchors)?;
            save_json(required(out, name)?, FileKind::AnchorBank, &bank)?;
        }
        Command::DetectAnchors { data, bank, top_l, nms } => {
            let ds = load_dataset(data)?;
            let bank: AnchorBank = load_json(bank, FileKind::AnchorBank)?;
            let mut params = config.detection;
            params.top_l = top_l.unwrap_or(params.top_l);
            params.nms_iou = nms.unwrap_or(params.nms_iou);
            let dets = detect_all(&bank, &ds.store, &params)?;
            save_json(required(out, name)?, FileKind::AnchorDetections, &dets)?;
        }
        Command::TrainPart(a) => {
            let ds = load_dataset(&a.data)?;
            let dets = anchor_detections(&a.anchors, &ds, &config)?;
            let mut cfg = config.mil;
            if let Some(v) = &a.variant {
                cfg = cfg.with_variant(v.parse()?);
            }
            let data = ds.weak_set(&a.concept)?;
            if a.lambda_search {
                let gt = ds.ground_truth.as_ref().ok_or_else(|| {
                    CliError::Usage("--lambda-search needs a dataset with ground truth".into())
                })?;
                let search =
                    lambda_search(&a.concept, &data, &data, gt, dets.as_ref(), &cfg, &LAMBDA_GRID)?;
                log::info!("lambda search {:?} -> {}", search.scores, search.lambda);
                cfg.lambda = search.lambda;
            }
            let exemplar = match (&a.exemplar_image, &a.exemplar_box) {
                (Some(image), Some(b)) => Some(ExemplarSpec {
                    image: image.clone(),
                    region: parse_region(b)?,
                    beta: a.beta,
                }),
                _ => None,
            };
            let model = train_part(&a.concept, &data, dets.as_ref(), exemplar.as_ref(), &cfg)?;
            save_json(required(out, name)?, FileKind::PartModel, &model)?;
        }
        Command::Detect(a) => {
            let ds = load_dataset(&a.data)?;
            let model: PartModel = load_json(&a.model, FileKind::PartModel)?;
            let dets = anchor_detections(&a.anchors, &ds, &config)?;
            let images = (0..ds.store.len())
                .into_par_iter()
                .map(|i| {
                    let d = dets.as_ref().map(|d| d.image(i)).transpose()?;
                    Ok(ImageReport {
                        image: ds.store.image(i).id.clone(),
                        detections: model.detect(&ds.store, i, d, a.top, a.nms)?,
                    })
                })
                .collect::<Result<Vec<_>, Error>>()?;
            let report = DetectionReport {
                concept: model.concept.clone(),
                variant: model.variant(),
                images,
            };
            emit(out, &report)?;
        }
        Command::Eval(a) => {
            let ds = load_dataset(&a.data)?;
            let gt = ds.ground_truth.as_ref().ok_or_else(|| {
                CliError::Usage("eval needs a dataset with ground truth".into())
            })?;
            let dets = anchor_detections(&a.anchors, &ds, &config)?;
            let mut report = EvalReport {
                iou_threshold: a.iou,
                parts: Vec::new(),
            };
            for path in &a.models {
                let model: PartModel = load_json(path, FileKind::PartModel)?;
                let data = ds.weak_set(&model.concept)?;
                report
                    .parts
                    .push(evaluate_part(&model, &data, gt, dets.as_ref(), a.iou)?);
            }
            print!("{}", report.to_table());
            if let Some(out) = out {
                save_json(out, FileKind::Report, &report)?;
            }
        }
        Command::Match(a) => {
            let ds = load_dataset(&a.data)?;
            let dets = anchor_detections(&a.anchors, &ds, &config)?;
            let mut settings = config.matching;
            if let Some(v) = &a.variant {
                settings.variant = v.parse()?;
            }
            if let Some(pairs) = &a.pairs {
                let gt = ds.ground_truth.as_ref().ok_or_else(|| {
                    CliError::Usage("the match benchmark needs ground truth".into())
                })?;
                let file: PairsFile = load_json(pairs, FileKind::Pairs)?;
                let pairs = file
                    .pairs
                    .iter()
                    .map(|(s, t)| Ok((image_index(&ds, s)?, image_index(&ds, t)?)))
                    .collect::<Result<Vec<_>, Error>>()?;
                let report = match_benchmark(&ds.store, gt, dets.as_ref(), &pairs, &settings)?;
                emit(out, &report)?;
            } else {
                let (Some(source), Some(target), Some(region)) = (&a.source, &a.target, &a.region)
                else {
                    return Err(CliError::Usage(
                        "match needs --pairs, or --source, --box and --target".into(),
                    ));
                };
                let s = image_index(&ds, source)?;
                let t = image_index(&ds, target)?;
                let region = parse_region(region)?;
                let found = match_regions(&ds.store, dets.as_ref(), s, &region, t, &settings)?;
                emit(
                    out,
                    &MatchAnswer {
                        target: target.clone(),
                        region: found,
                    },
                )?;
            }
        }
        Command::GridEncode { data, bank } => {
            let ds = load_dataset(data)?;
            let bank: AnchorBank = load_json(bank, FileKind::AnchorBank)?;
            let images = (0..ds.store.len())
                .into_par_iter()
                .map(|i| GridCode {
                    image: ds.store.image(i).id.clone(),
                    code: grid_encode(&bank, &ds.store, i),
                })
                .collect();
            emit(
                out,
                &GridReport {
                    anchors: bank.len(),
                    cells: GRID_CELLS,
                    images,
                },
            )?;
        }
        Command::Atlas(a) => {
            let ds = load_dataset(&a.data)?;
            let bank: AnchorBank = load_json(&a.bank, FileKind::AnchorBank)?;
            let models = a
                .models
                .iter()
                .map(|p| load_json(p, FileKind::PartModel))
                .collect::<Result<Vec<PartModel>, Error>>()?;
            let mut params = config.atlas;
            params.top_edges = a.top_edges.unwrap_or(params.top_edges);
            let atlas = export_atlas(&models, &bank, &ds, &params)?;
            save_json(required(out, name)?, FileKind::Atlas, &atlas)?;
        }
    }
    RunRecord::new(name, cli.seed, &config).write(out)
}

fn verb(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::TrainAnchors { .. } => "train-anchors",
        Command::DetectAnchors { .. } => "detect-anchors",
        Command::TrainPart(_) => "train-part",
        Command::Detect(_) => "detect",
        Command::Eval(_) => "eval",
        Command::Match(_) => "match",
        Command::GridEncode { .. } => "grid-encode",
        Command::Atlas(_) => "atlas",
    }
}

fn required<'a>(out: Option<&'a Path>, verb: &str) -> Result<&'a Path, CliError> {
    out.ok_or_else(|| CliError::Usage(format!("{verb} needs --out")))
}

/// Writes a report to `out`, or prints it when there is none.
fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<(), CliError> {
    match out {
        Some(path) => save_json(path, FileKind::Report, value)?,
        None => println!("{}", to_json(FileKind::Report, value)?),
    }
    Ok(())
}

fn synth(a: &crate::SynthArgs, config: &RunConfig, seed: u64, out: &Path) -> Result<(), CliError> {
    let mut profile = config.synth.clone().unwrap_or_else(|| match a.profile {
        Preset::Standard => SyntheticProfile::standard(seed),
        Preset::Nested => SyntheticProfile::nested(seed),
    });
    profile.images = a.images.unwrap_or(profile.images);
    profile.negatives = a.negatives.unwrap_or(profile.negatives);
    profile.noise = a.noise.unwrap_or(profile.noise);
    let set = match a.congruent {
        Some(n) => {
            let (set, pairs) = generate_congruent(&profile, n)?;
            let id = |i: usize| set.dataset.store.image(i).id.clone();
            let file = PairsFile {
                pairs: pairs.iter().map(|&(s, t)| (id(s), id(t))).collect(),
            };
            save_json(&pairs_path(out), FileKind::Pairs, &file)?;
            set
        }
        None => generate_synthetic(&profile)?,
    };
    save_dataset(&set.dataset, out)?;
    println!(
        "{} images, {} concepts, descriptor dim {}",
        set.dataset.store.len(),
        set.dataset.vocabulary.len(),
        set.dataset.store.dim()
    );
    Ok(())
}

/// `scenes.json` -> `scenes.pairs.json`.
pub fn pairs_path(manifest: &Path) -> PathBuf {
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    manifest.with_file_name(format!("{stem}.pairs.json"))
}

fn anchor_detections(
    src: &AnchorSource,
    ds: &Dataset,
    config: &RunConfig,
) -> Result<Option<AnchorDetections>, CliError> {
    if let Some(path) = &src.detections {
        let dets: AnchorDetections = load_json(path, FileKind::AnchorDetections)?;
        if dets.images.len() != ds.store.len() {
            return Err(Error::DimensionMismatch {
                record: format!("{} (images)", path.display()),
                expected: ds.store.len(),
                found: dets.images.len(),
            }
            .into());
        }
        return Ok(Some(dets));
    }
    if let Some(path) = &src.bank {
        let bank: AnchorBank = load_json(path, FileKind::AnchorBank)?;
        return Ok(Some(detect_all(&bank, &ds.store, &config.detection)?));
    }
    Ok(None)
}

fn image_index(ds: &Dataset, id: &str) -> Result<usize, Error> {
    ds.store
        .position(id)
        .ok_or_else(|| Error::UnknownImage(id.to_string()))
}

fn parse_region(text: &str) -> Result<Region, CliError> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("bad box `{text}`: {e}")))?;
    let [x1, y1, x2, y2] = v[..] else {
        return Err(CliError::Usage(format!(
            "bad box `{text}`: expected x1,y1,x2,y2"
        )));
    };
    Ok(Region::new(x1, y1, x2, y2)?)
}
