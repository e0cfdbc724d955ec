use std::fs;
use std::path::Path;

use mvr_core::pointcloud::{make_synthetic, save_ply, PointCloud};
use rayon::prelude::*;

use super::save_json;
use crate::config::RunConfig;
use crate::dataset::{Manifest, SampleEntry, Split, CONFIG};
use crate::CliError;

pub fn synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<Manifest, CliError> {
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .map_err(|e| mvr_core::Error::Io {
                path: out.into(),
                source: e,
            })?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(CliError::Usage(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    }
    let mut plan = Vec::new();
    for &cat in &cfg.categories {
        for i in 0..cfg.n_train {
            plan.push((cat, Split::Train, i, false));
        }
        for i in 0..cfg.n_test_normal + cfg.n_test_anomalous {
            plan.push((cat, Split::Test, i, i >= cfg.n_test_normal));
        }
    }
    let samples = plan
        .par_iter()
        .map(|&(cat, split, i, anomalous)| -> Result<SampleEntry, CliError> {
            let seed = cfg.sample_seed(cat, split.name(), i);
            let cloud = make_synthetic(cat, cfg.n_points, anomalous.then(|| cfg.anomaly()), seed)?;
            let n_labeled = cloud.positive_count();
            if anomalous && n_labeled == 0 {
                return Err(mvr_core::Error::Validation(format!(
                    "{} {} sample {i} is marked anomalous but has no anomalous points \
                     (anomaly_depth {}, anomaly_radius {})",
                    cat.name(),
                    split.name(),
                    cfg.anomaly_depth,
                    cfg.anomaly_radius
                ))
                .into());
            }
            let file = format!("{}/{}/{i:03}.ply", cat.name(), split.name());
            let stored = match split {
                Split::Train => PointCloud::new(cloud.points().to_vec())?,
                Split::Test => cloud,
            };
            save_ply(&stored, out.join(&file))?;
            Ok(SampleEntry {
                file,
                category: cat,
                split,
                index: i,
                anomalous,
                seed,
                n_points: cfg.n_points,
                n_labeled,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = Manifest { samples };
    save_json(&out.join(CONFIG), cfg)?;
    manifest.save(out)?;
    Ok(manifest)
}
