use std::collections::BTreeMap;
use std::path::Path;

use mvr_core::evaluation::EvalReport;
use mvr_core::fusion::AnomalyResult;
use mvr_core::io::{read_file, write_atomic};
use mvr_core::pointcloud::PointCloud;
use mvr_core::Error;
use serde::{Deserialize, Serialize};

use super::{fmt_metric, save_json};
use crate::config::RunConfig;
use crate::dataset::{load_cloud, Manifest, SampleEntry};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub file: String,
    pub category: String,
    pub anomalous: Option<bool>,
    pub object_score: f64,
    pub invisible_points: usize,
    pub point_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFile {
    pub config_hash: String,
    pub results: Vec<ScoreRecord>,
}

impl ScoreFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        serde_json::from_slice(&read_file(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())).into())
    }
}

type CategoryData = (Vec<AnomalyResult>, Vec<(PointCloud, bool)>, Vec<String>);

/// Builds the report from scores and ground truth, writing `report.json` and `report.csv`.
pub fn eval(cfg: &RunConfig, scores: &Path, data: &Path, out: &Path) -> Result<EvalReport, CliError> {
    let scores = ScoreFile::load(scores)?;
    let manifest = Manifest::load(data)?;
    let by_file: BTreeMap<&str, &SampleEntry> = manifest.samples.iter().map(|s| (s.file.as_str(), s)).collect();
    let mut per: BTreeMap<String, CategoryData> = BTreeMap::new();
    for r in &scores.results {
        let entry = by_file
            .get(r.file.as_str())
            .ok_or_else(|| Error::Data(format!("{} is not in the dataset manifest", r.file)))?;
        let cloud = load_cloud(data, entry)?;
        let slot = per.entry(r.category.clone()).or_default();
        slot.0.push(AnomalyResult {
            point_scores: r.point_scores.clone(),
            object_score: r.object_score,
            invisible_points: r.invisible_points,
        });
        slot.1.push((cloud, entry.anomalous));
        slot.2.push(r.file.clone());
    }
    let cats: Vec<_> = per.into_iter().map(|(c, (r, t, n))| (c, r, t, n)).collect();
    let report = EvalReport::build(&cats, cfg.hash())?;
    save_json(&out.join("report.json"), &report)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(["scope", "o_roc", "p_roc"]).map_err(csv_err)?;
    w.write_record(["all", &fmt_metric(report.o_roc), &fmt_metric(report.p_roc)])
        .map_err(csv_err)?;
    for (c, m) in &report.categories {
        w.write_record([c.as_str(), &fmt_metric(m.o_roc), &fmt_metric(m.p_roc)])
            .map_err(csv_err)?;
    }
    w.write_record([
        "category_mean",
        &fmt_metric(report.category_mean.o_roc),
        &fmt_metric(report.category_mean.p_roc),
    ])
    .map_err(csv_err)?;
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(&out.join("report.csv"), &bytes)?;
    Ok(report)
}
