use std::path::Path;

use mvr_core::pipeline::{network_input, render_cloud};
use mvr_core::projection::write_bundle;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::dataset::{bundle_is_current, load_cloud, Manifest};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderSummary {
    pub rendered: usize,
    pub skipped: usize,
}

/// Writes a view bundle per cloud, skipping bundles whose content hash matches.
pub fn render(cfg: &RunConfig, data: &Path, views_root: &Path) -> Result<RenderSummary, CliError> {
    let manifest = Manifest::load(data)?;
    let views = cfg.view_config();
    let mut summary = RenderSummary {
        rendered: 0,
        skipped: 0,
    };
    for entry in &manifest.samples {
        let cloud = load_cloud(data, entry)?;
        let dir = entry.bundle_dir(views_root);
        if bundle_is_current(&dir, &cloud, &views) {
            summary.skipped += 1;
            continue;
        }
        let rendered = render_cloud(&cloud, &views)?;
        let inputs = rendered
            .renders
            .par_iter()
            .map(|r| network_input(r, views.input_resolution))
            .collect::<mvr_core::Result<Vec<_>>>()?;
        write_bundle(&dir, &rendered.meta, &rendered.renders, &inputs)?;
        summary.rendered += 1;
    }
    Ok(summary)
}
