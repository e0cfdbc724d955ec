mod ablate;
mod eval;
mod infer;
mod render;
mod synth;
mod train;

use std::path::{Path, PathBuf};

pub use ablate::{ablate, AblationAxis, AblationRow};
pub use eval::{eval, ScoreFile, ScoreRecord};
pub use infer::{infer, InferOptions};
pub use render::{render, RenderSummary};
pub use synth::synth;
pub use train::{train, CategoryRun};

use crate::config::RunConfig;
use crate::dataset::CONFIG;
use crate::{CliError, Command};

/// Config from `--config` when given, else from `fallback` if it exists, else
/// the defaults; flag overrides are applied last.
pub fn resolve_config(
    explicit: Option<&Path>,
    fallback: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<RunConfig, CliError> {
    let base = explicit
        .map(Path::to_path_buf)
        .or_else(|| fallback.map(Path::to_path_buf).filter(|p| p.exists()));
    RunConfig::load(base.as_deref(), overrides)
}

fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let json = serde_json::to_vec_pretty(value).map_err(|e| mvr_core::Error::Data(e.to_string()))?;
    Ok(mvr_core::io::write_atomic(path, &json)?)
}

fn views_root(data: &Path, views: Option<PathBuf>) -> PathBuf {
    views.unwrap_or_else(|| data.join("views"))
}

pub fn dispatch(command: Command, overrides: &[(String, String)]) -> Result<(), CliError> {
    match command {
        Command::Synth { out, force, common } => {
            let cfg = resolve_config(common.config.as_deref(), None, overrides)?;
            let m = synth(&cfg, &out, force)?;
            println!("wrote {} samples to {}", m.samples.len(), out.display());
        }
        Command::Render { data, views, common } => {
            let cfg = resolve_config(common.config.as_deref(), Some(&data.join(CONFIG)), overrides)?;
            let root = views_root(&data, views);
            let s = render(&cfg, &data, &root)?;
            println!("rendered {} bundles, {} already up to date", s.rendered, s.skipped);
        }
        Command::Train {
            data,
            out,
            views,
            common,
        } => {
            let cfg = resolve_config(common.config.as_deref(), Some(&data.join(CONFIG)), overrides)?;
            let root = views_root(&data, views);
            for run in train(&cfg, &data, Some(&root), &out, |cat, r| {
                if r.step == 1 || r.step % 10 == 0 {
                    println!("{cat} step {} loss {:.6} ({} ms)", r.step, r.loss, r.wall_ms);
                }
            })? {
                println!("{}: final loss {:.6}", run.category, run.final_loss);
            }
        }
        Command::Infer {
            run,
            data,
            cloud,
            category,
            checkpoint,
            out,
            views,
            ply,
            heatmaps,
            common,
        } => {
            let cfg = resolve_config(common.config.as_deref(), Some(&run.join(CONFIG)), overrides)?;
            let views = match (&data, views) {
                (_, Some(v)) => Some(v),
                (Some(d), None) => Some(d.join("views")),
                _ => None,
            };
            let opts = InferOptions {
                run,
                data,
                cloud,
                category,
                checkpoint,
                views,
                ply,
                heatmaps,
            };
            let scores = infer(&cfg, &opts, &out)?;
            println!(
                "scored {} clouds into {}",
                scores.results.len(),
                out.join("scores.json").display()
            );
        }
        Command::Eval {
            scores,
            data,
            out,
            common,
        } => {
            let cfg = resolve_config(common.config.as_deref(), Some(&data.join(CONFIG)), overrides)?;
            let report = eval(&cfg, &scores, &data, &out)?;
            println!("O-ROC {} P-ROC {}", fmt_metric(report.o_roc), fmt_metric(report.p_roc));
        }
        Command::Ablate {
            data,
            out,
            axis,
            values,
            run,
            retrain,
            common,
        } => {
            let axis: AblationAxis = axis.parse()?;
            let cfg = resolve_config(common.config.as_deref(), Some(&data.join(CONFIG)), overrides)?;
            for row in ablate(&cfg, &data, &out, axis, &values, run.as_deref(), retrain)? {
                println!(
                    "{}={} O-ROC {} P-ROC {} zero pixels {:.1}",
                    row.axis,
                    row.value,
                    fmt_metric(row.o_roc),
                    fmt_metric(row.p_roc),
                    row.mean_zero_pixels
                );
            }
        }
    }
    Ok(())
}

pub fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}
