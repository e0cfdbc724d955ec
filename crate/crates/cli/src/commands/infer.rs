use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use mvr_core::backbone::load_weights;
use mvr_core::io::write_atomic;
use mvr_core::pipeline::{prepare_rendered, score_views, teacher_views, RenderedCloud};
use mvr_core::pointcloud::{load_ply, save_ply_colored, score_color, PointCloud, ShapeKind};
use mvr_core::projection::{ViewRender, EMPTY_OWNER};
use mvr_core::weights::WeightArchive;
use mvr_core::Error;

use super::eval::{ScoreFile, ScoreRecord};
use super::save_json;
use super::train::{FINAL_FILE, TEACHER_FILE};
use crate::config::RunConfig;
use crate::dataset::{load_cloud, rendered_views, Manifest, SampleEntry, Split};
use crate::CliError;

#[derive(Debug, Clone, Default)]
pub struct InferOptions {
    pub run: PathBuf,
    pub data: Option<PathBuf>,
    pub cloud: Option<PathBuf>,
    pub category: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub views: Option<PathBuf>,
    pub ply: bool,
    pub heatmaps: bool,
}

struct Model {
    teacher: WeightArchive,
    student: WeightArchive,
}

fn load_model(cfg: &RunConfig, opts: &InferOptions, cat: ShapeKind) -> Result<Model, CliError> {
    let dir = opts.run.join(cat.name());
    let teacher = load_weights(dir.join(TEACHER_FILE), &cfg.encoder_config())?;
    let path = opts.checkpoint.clone().unwrap_or_else(|| dir.join(FINAL_FILE));
    let student = WeightArchive::load(&path)?;
    student.validate(&cfg.decoder_config().param_shapes())?;
    Ok(Model { teacher, student })
}

/// Per-view score images at render resolution: each owned pixel takes its
/// point's color on the blue-to-red map, empty pixels stay black.
pub fn heatmap(render: &ViewRender, scores: &[f64]) -> RgbImage {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (h, w) = render.owner.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let o = render.owner[(y as usize, x as usize)];
        if o == EMPTY_OWNER {
            image::Rgb([0, 0, 0])
        } else {
            image::Rgb(score_color(scores[o as usize], lo, hi))
        }
    })
}

fn write_heatmaps(dir: &Path, rendered: &RenderedCloud, scores: &[f64]) -> Result<(), CliError> {
    for (k, r) in rendered.renders.iter().enumerate() {
        let mut bytes = Vec::new();
        heatmap(r, scores)
            .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
            .map_err(|e| Error::Data(e.to_string()))?;
        write_atomic(&dir.join(format!("view_{k:02}.png")), &bytes)?;
    }
    Ok(())
}

fn score_one(
    cfg: &RunConfig,
    model: &Model,
    rendered: &RenderedCloud,
) -> Result<mvr_core::fusion::AnomalyResult, CliError> {
    let tv = teacher_views(
        &prepare_rendered(rendered)?,
        &cfg.encoder_config(),
        &model.teacher.params,
        cfg.fusion,
    )?;
    Ok(score_views(&tv, &cfg.decoder_config(), &model.student.params)?)
}

fn record(
    file: String,
    category: ShapeKind,
    anomalous: Option<bool>,
    r: mvr_core::fusion::AnomalyResult,
) -> ScoreRecord {
    ScoreRecord {
        file,
        category: category.name().to_string(),
        anomalous,
        object_score: r.object_score,
        invisible_points: r.invisible_points,
        point_scores: r.point_scores,
    }
}

fn outputs(
    opts: &InferOptions,
    out: &Path,
    stem: &str,
    cloud: &PointCloud,
    rendered: &RenderedCloud,
    scores: &[f64],
) -> Result<(), CliError> {
    if opts.ply {
        save_ply_colored(cloud, scores, out.join("ply").join(format!("{stem}.ply")))?;
    }
    if opts.heatmaps {
        write_heatmaps(&out.join("heatmaps").join(stem), rendered, scores)?;
    }
    Ok(())
}

/// Scores every test cloud of a dataset (or one cloud) and writes `scores.json`.
pub fn infer(cfg: &RunConfig, opts: &InferOptions, out: &Path) -> Result<ScoreFile, CliError> {
    let views = cfg.view_config();
    let mut results = Vec::new();
    match (&opts.data, &opts.cloud) {
        (Some(data), None) => {
            let manifest = Manifest::load(data)?;
            for &cat in &cfg.categories {
                let entries: Vec<&SampleEntry> = manifest.select(cat, Split::Test);
                if entries.is_empty() {
                    continue;
                }
                let model = load_model(cfg, opts, cat)?;
                for e in entries {
                    let cloud = load_cloud(data, e)?;
                    let rendered = rendered_views(opts.views.as_deref(), e, &cloud, &views)?;
                    let r = score_one(cfg, &model, &rendered)?;
                    outputs(opts, out, &e.stem(), &cloud, &rendered, &r.point_scores)?;
                    results.push(record(e.file.clone(), cat, Some(e.anomalous), r));
                }
            }
        }
        (None, Some(path)) => {
            let cat: ShapeKind = opts
                .category
                .as_deref()
                .unwrap_or_default()
                .parse()
                .map_err(|e: Error| CliError::Usage(e.to_string()))?;
            let model = load_model(cfg, opts, cat)?;
            let cloud = load_ply(path)?;
            let rendered = mvr_core::pipeline::render_cloud(&cloud, &views)?;
            let r = score_one(cfg, &model, &rendered)?;
            let stem = path
                .file_stem()
                .map_or("cloud".into(), |s| s.to_string_lossy().into_owned());
            outputs(opts, out, &stem, &cloud, &rendered, &r.point_scores)?;
            let anomalous = cloud.labels().map(|_| cloud.positive_count() > 0);
            results.push(record(path.display().to_string(), cat, anomalous, r));
        }
        _ => return Err(CliError::Usage("infer needs exactly one of --data or --cloud".into())),
    }
    let scores = ScoreFile {
        config_hash: cfg.hash(),
        results,
    };
    save_json(&out.join("scores.json"), &scores)?;
    Ok(scores)
}
