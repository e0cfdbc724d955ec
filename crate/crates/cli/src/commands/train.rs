use std::path::Path;

use mvr_core::backbone::init_weights;
use mvr_core::io::write_atomic;
use mvr_core::pipeline::{teacher_views, TeacherViews};
use mvr_core::reconstruction::init_student;
use mvr_core::training::{self, StepRecord};
use mvr_core::weights::WeightArchive;
use mvr_core::Error;

use super::save_json;
use crate::config::RunConfig;
use crate::dataset::{load_cloud, prepared_views, Manifest, Split, CONFIG};
use crate::CliError;

pub const TEACHER_FILE: &str = "teacher.mvrw";
pub const FINAL_FILE: &str = "final.mvrw";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Clone)]
pub struct CategoryRun {
    pub category: String,
    pub final_loss: f64,
    pub log: Vec<StepRecord>,
}

fn write_log(path: &Path, log: &[StepRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(["step", "loss", "lr", "wall_ms"]).map_err(io)?;
    for r in log {
        w.write_record([
            r.step.to_string(),
            format!("{:e}", r.loss),
            format!("{:e}", r.lr),
            r.wall_ms.to_string(),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(write_atomic(path, &bytes)?)
}

/// Trains one student per category. Writes `<out>/config.json` and, per
/// category, the frozen teacher, the final student, periodic checkpoints and
/// the step log.
pub fn train(
    cfg: &RunConfig,
    data: &Path,
    views_root: Option<&Path>,
    out: &Path,
    mut progress: impl FnMut(&str, &StepRecord),
) -> Result<Vec<CategoryRun>, CliError> {
    let manifest = Manifest::load(data)?;
    let enc = cfg.encoder_config();
    let dec = cfg.decoder_config();
    let views = cfg.view_config();
    let teacher = init_weights(&enc, cfg.teacher_seed())?;
    save_json(&out.join(CONFIG), cfg)?;
    let mut runs = Vec::new();
    for &cat in &cfg.categories {
        let entries = manifest.select(cat, Split::Train);
        if entries.is_empty() {
            return Err(Error::Data(format!("no training clouds for category {}", cat.name())).into());
        }
        let set = entries
            .iter()
            .map(|e| {
                let cloud = load_cloud(data, e)?;
                if cloud.positive_count() > 0 {
                    return Err(Error::Data(format!("training cloud {} has anomalous labels", e.file)));
                }
                teacher_views(
                    &prepared_views(views_root, e, &cloud, &views)?,
                    &enc,
                    &teacher.params,
                    cfg.fusion,
                )
            })
            .collect::<mvr_core::Result<Vec<TeacherViews>>>()?;
        let dir = out.join(cat.name());
        teacher.save(dir.join(TEACHER_FILE))?;
        let init = init_student(&dec, cfg.student_seed())?;
        let mut log = Vec::with_capacity(cfg.iterations);
        let student = training::train(&set, &dec, &init, &cfg.train_config(), |r, params| {
            progress(cat.name(), r);
            log.push(r.clone());
            if cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0 {
                WeightArchive::new(params.clone()).save(dir.join(format!("ckpt_{:05}.mvrw", r.step)))?;
            }
            Ok(())
        })?;
        WeightArchive::new(student).save(dir.join(FINAL_FILE))?;
        write_log(&dir.join(LOG_FILE), &log)?;
        runs.push(CategoryRun {
            category: cat.name().to_string(),
            final_loss: log.last().map_or(f64::NAN, |r| r.loss),
            log,
        });
    }
    Ok(runs)
}
