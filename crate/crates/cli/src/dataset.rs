//! Synthetic dataset layout: `manifest.json` and `config.json` at the root,
//! clouds under `{category}/{split}/{index:03}.ply`, view bundles under
//! `views/{category}/{split}/{index:03}/`.

use std::path::{Path, PathBuf};

use mvr_core::io::{read_file, write_atomic};
use mvr_core::pipeline::{content_hash, prepare_rendered, render_cloud, PreparedViews, RenderedCloud, ViewConfig};
use mvr_core::pointcloud::{load_ply, PointCloud, ShapeKind};
use mvr_core::projection::{read_bundle, read_meta};
use mvr_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    /// Path relative to the dataset root.
    pub file: String,
    pub category: ShapeKind,
    pub split: Split,
    pub index: usize,
    pub anomalous: bool,
    pub seed: u64,
    pub n_points: usize,
    pub n_labeled: usize,
}

impl SampleEntry {
    pub fn stem(&self) -> String {
        format!("{}_{}_{:03}", self.category.name(), self.split.name(), self.index)
    }

    pub fn bundle_dir(&self, views_root: &Path) -> PathBuf {
        views_root
            .join(self.category.name())
            .join(self.split.name())
            .join(format!("{:03}", self.index))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: Vec<SampleEntry>,
}

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.json";

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        serde_json::from_slice(&read_file(&path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        write_atomic(&root.join(MANIFEST), &json)
    }

    pub fn select(&self, category: ShapeKind, split: Split) -> Vec<&SampleEntry> {
        self.samples
            .iter()
            .filter(|s| s.category == category && s.split == split)
            .collect()
    }
}

pub fn load_cloud(root: &Path, entry: &SampleEntry) -> Result<PointCloud> {
    let cloud = load_ply(root.join(&entry.file))?;
    if cloud.len() != entry.n_points {
        return Err(Error::Data(format!(
            "{} has {} points, manifest says {}",
            entry.file,
            cloud.len(),
            entry.n_points
        )));
    }
    Ok(cloud)
}

/// True when the bundle at `dir` was rendered from this cloud with this view config.
pub fn bundle_is_current(dir: &Path, cloud: &PointCloud, views: &ViewConfig) -> bool {
    read_meta(dir).is_ok_and(|m| m.content_hash == content_hash(cloud, views))
}

/// Renders of a cloud, read from its bundle when current and rendered otherwise.
pub fn rendered_views(
    views_root: Option<&Path>,
    entry: &SampleEntry,
    cloud: &PointCloud,
    views: &ViewConfig,
) -> Result<RenderedCloud> {
    if let Some(root) = views_root {
        let dir = entry.bundle_dir(root);
        if bundle_is_current(&dir, cloud, views) {
            let (meta, renders) = read_bundle(&dir)?;
            return Ok(RenderedCloud { meta, renders });
        }
    }
    render_cloud(cloud, views)
}

pub fn prepared_views(
    views_root: Option<&Path>,
    entry: &SampleEntry,
    cloud: &PointCloud,
    views: &ViewConfig,
) -> Result<PreparedViews> {
    prepare_rendered(&rendered_views(views_root, entry, cloud, views)?)
}
