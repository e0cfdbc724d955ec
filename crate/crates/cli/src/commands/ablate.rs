use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mvr_core::io::write_atomic;
use mvr_core::pipeline::network_input;
use mvr_core::projection::{count_interior_zero_pixels, count_zero_pixels};
use mvr_core::Error;
use serde::Serialize;

use super::{eval, fmt_metric, infer, render, train, InferOptions};
use crate::config::RunConfig;
use crate::dataset::{load_cloud, rendered_views, Manifest, Split};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Resolution,
    Views,
    Depth,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 3] = [AblationAxis::Resolution, AblationAxis::Views, AblationAxis::Depth];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Resolution => "resolution",
            AblationAxis::Views => "views",
            AblationAxis::Depth => "depth",
        }
    }

    fn apply(self, cfg: &RunConfig, value: usize) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            AblationAxis::Resolution => c.render_resolution = value,
            AblationAxis::Views => c.n_views = value,
            AblationAxis::Depth => c.depth = value,
        }
        c
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown ablation axis `{s}`; valid axes are resolution, views, depth"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: usize,
    pub o_roc: Option<f64>,
    pub p_roc: Option<f64>,
    pub mean_zero_pixels: f64,
    pub mean_interior_zero_pixels: f64,
}

/// Zero-pixel counts of the network inputs, averaged over every view of every test cloud.
fn zero_pixel_stats(cfg: &RunConfig, data: &Path, views_root: &Path) -> Result<(f64, f64), CliError> {
    let manifest = Manifest::load(data)?;
    let views = cfg.view_config();
    let (mut all, mut interior, mut n) = (0usize, 0usize, 0usize);
    for &cat in &cfg.categories {
        for e in manifest.select(cat, Split::Test) {
            let cloud = load_cloud(data, e)?;
            for r in &rendered_views(Some(views_root), e, &cloud, &views)?.renders {
                let img = network_input(r, views.input_resolution)?;
                all += count_zero_pixels(img.view());
                interior += count_interior_zero_pixels(img.view());
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Data("no test clouds to measure".into()).into());
    }
    Ok((all as f64 / n as f64, interior as f64 / n as f64))
}

fn write_rows(path: &Path, rows: &[AblationRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Data(e.to_string());
    w.write_record([
        "axis",
        "value",
        "o_roc",
        "p_roc",
        "mean_zero_pixels",
        "mean_interior_zero_pixels",
    ])
    .map_err(io)?;
    for r in rows {
        w.write_record([
            r.axis.clone(),
            r.value.to_string(),
            fmt_metric(r.o_roc),
            fmt_metric(r.p_roc),
            format!("{:.3}", r.mean_zero_pixels),
            format!("{:.3}", r.mean_interior_zero_pixels),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(write_atomic(path, &bytes)?)
}

/// Sweeps one config axis: per value, renders, (re)trains when needed, scores
/// and evaluates the test split, then writes one row per value to `report.csv`.
/// Depth always retrains since it changes the teacher.
pub fn ablate(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    axis: AblationAxis,
    values: &[usize],
    run: Option<&Path>,
    retrain: bool,
) -> Result<Vec<AblationRow>, CliError> {
    if values.is_empty() {
        return Err(CliError::Usage("--values needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let c = axis.apply(cfg, value);
        c.validate()?;
        let tag = format!("{axis}-{value}");
        let views_root = out.join("views").join(&tag);
        render(&c, data, &views_root)?;
        let run_dir: PathBuf = match run {
            Some(r) if !retrain && axis != AblationAxis::Depth => r.to_path_buf(),
            _ => {
                let dir = out.join("runs").join(&tag);
                train(&c, data, Some(&views_root), &dir, |_, _| {})?;
                dir
            }
        };
        let scored = out.join("scores").join(&tag);
        let opts = InferOptions {
            run: run_dir,
            data: Some(data.to_path_buf()),
            views: Some(views_root.clone()),
            ..Default::default()
        };
        infer(&c, &opts, &scored)?;
        let report = eval(&c, &scored.join("scores.json"), data, &scored)?;
        let (zeros, interior) = zero_pixel_stats(&c, data, &views_root)?;
        rows.push(AblationRow {
            axis: axis.to_string(),
            value,
            o_roc: report.o_roc,
            p_roc: report.p_roc,
            mean_zero_pixels: zeros,
            mean_interior_zero_pixels: interior,
        });
        write_rows(&out.join("report.csv"), &rows)?;
    }
    Ok(rows)
}
