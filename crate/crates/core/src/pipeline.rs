//! Glue from a point cloud to fused teacher/student point features.

use ndarray::{Array2, Array3, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{encoder_forward, EncoderConfig, FeatureMap};
use crate::error::{Error, Result};
use crate::fusion::{anomaly_scores, AnomalyResult, FusedPointFeatures, FusionMode, FusionOperator, ViewSampler};
use crate::pointcloud::PointCloud;
use crate::projection::{
    depth_to_intensity, downsample, generate_view_poses, intensity_to_image, render_views, BundleMeta,
    CameraIntrinsics, Correspondence, PoseRecord, ViewRender, DEFAULT_CAMERA_RADIUS,
};
use crate::reconstruction::{aggregate_layers, student_forward, DecoderConfig};
use crate::tensor::ParamSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewConfig {
    pub render_resolution: usize,
    pub input_resolution: usize,
    pub n_views: usize,
    pub camera_radius: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            render_resolution: 672,
            input_resolution: 224,
            n_views: 27,
            camera_radius: DEFAULT_CAMERA_RADIUS,
        }
    }
}

impl ViewConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_resolution == 0
            || self.render_resolution == 0
            || !self.render_resolution.is_multiple_of(self.input_resolution)
        {
            return Err(Error::Config(format!(
                "render resolution {} is not a positive multiple of {}; pick a multiple of {}",
                self.render_resolution, self.input_resolution, self.input_resolution
            )));
        }
        if self.n_views == 0 {
            return Err(Error::Config("n_views must be ≥ 1".into()));
        }
        if !(self.camera_radius > 1.0) {
            return Err(Error::Config("camera radius must exceed the unit object radius".into()));
        }
        Ok(())
    }

    pub fn factor(&self) -> usize {
        self.render_resolution / self.input_resolution
    }
}

/// Renders of one normalized cloud plus the metadata needed to rebuild them.
#[derive(Debug, Clone)]
pub struct RenderedCloud {
    pub meta: BundleMeta,
    pub renders: Vec<ViewRender>,
}

/// Hash over the raw coordinates and the view configuration; a bundle with a
/// matching hash is up to date.
pub fn content_hash(cloud: &PointCloud, views: &ViewConfig) -> String {
    let mut h = Sha256::new();
    for p in cloud.points() {
        for c in p.iter() {
            h.update(c.to_le_bytes());
        }
    }
    h.update(serde_json::to_vec(views).unwrap_or_default());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn render_cloud(cloud: &PointCloud, views: &ViewConfig) -> Result<RenderedCloud> {
    views.validate()?;
    let (normalized, center, scale) = cloud.normalize();
    let poses = generate_view_poses(views.n_views, views.camera_radius);
    let k = CameraIntrinsics::for_resolution(views.render_resolution);
    let renders = render_views(&normalized, &poses, &k);
    let meta = BundleMeta {
        intrinsics: k,
        poses: poses.iter().map(PoseRecord::from).collect(),
        resolution: views.render_resolution,
        input_resolution: views.input_resolution,
        normalization_center: [center.x, center.y, center.z],
        normalization_scale: scale,
        n_points: cloud.len(),
        content_hash: content_hash(cloud, views),
    };
    Ok(RenderedCloud { meta, renders })
}

/// Network input for one view: intensity from float32-quantized depth (the
/// precision bundles store), replicated to three channels and block-averaged
/// down to the input resolution.
pub fn network_input(render: &ViewRender, input_resolution: usize) -> Result<Array3<f32>> {
    let depth = render.depth.mapv(|z| z as f32 as f64);
    let image = intensity_to_image(depth_to_intensity(depth.view()).view());
    downsample(image.view(), input_resolution, input_resolution)
}

/// Correspondences moved from render pixels to input pixels by integer block division.
pub fn input_correspondences(render: &ViewRender, factor: usize) -> Vec<Correspondence> {
    render
        .correspondences()
        .into_iter()
        .map(|c| Correspondence {
            point: c.point,
            u: c.u / factor as u32,
            v: c.v / factor as u32,
        })
        .collect()
}

/// Per-view network inputs and input-grid correspondences of one cloud.
#[derive(Debug, Clone)]
pub struct PreparedViews {
    pub inputs: Vec<Array3<f32>>,
    pub correspondences: Vec<Vec<Correspondence>>,
    pub n_points: usize,
    pub input_resolution: usize,
}

pub fn prepare_rendered(rendered: &RenderedCloud) -> Result<PreparedViews> {
    let input = rendered.meta.input_resolution;
    let factor = rendered.meta.resolution / input;
    let inputs = rendered
        .renders
        .par_iter()
        .map(|r| network_input(r, input))
        .collect::<Result<Vec<_>>>()?;
    let correspondences = rendered
        .renders
        .iter()
        .map(|r| input_correspondences(r, factor))
        .collect();
    Ok(PreparedViews {
        inputs,
        correspondences,
        n_points: rendered.meta.n_points,
        input_resolution: input,
    })
}

pub fn prepare_views(cloud: &PointCloud, views: &ViewConfig) -> Result<PreparedViews> {
    prepare_rendered(&render_cloud(cloud, views)?)
}

/// Frozen-teacher side of one cloud: the tap-averaged teacher map of every
/// view (which is also the student's bottleneck input), the fusion operator
/// and the fused teacher features of the visible points.
#[derive(Debug, Clone)]
pub struct TeacherViews {
    pub maps: Vec<FeatureMap<f32>>,
    pub fusion: FusionOperator,
    pub teacher_fused: Array2<f32>,
}

impl TeacherViews {
    pub fn n_views(&self) -> usize {
        self.maps.len()
    }

    pub fn n_points(&self) -> usize {
        self.fusion.n_points()
    }

    pub fn map_views(&self) -> Vec<ArrayView2<'_, f32>> {
        self.maps.iter().map(|m| m.data.view()).collect()
    }
}

pub fn teacher_views(
    prepared: &PreparedViews,
    encoder: &EncoderConfig,
    teacher: &ParamSet<f32>,
    mode: FusionMode,
) -> Result<TeacherViews> {
    if prepared.input_resolution != encoder.image_size {
        return Err(Error::Config(format!(
            "views are {} px but the encoder expects {} px",
            prepared.input_resolution, encoder.image_size
        )));
    }
    let (gh, gw) = encoder.grid();
    let maps = prepared
        .inputs
        .par_iter()
        .map(|img| aggregate_layers(&encoder_forward(img.view(), encoder, teacher)?))
        .collect::<Result<Vec<_>>>()?;
    let res = prepared.input_resolution;
    let samplers = prepared
        .correspondences
        .iter()
        .map(|c| ViewSampler::new(c, res, res, gw, gh))
        .collect::<Result<Vec<_>>>()?;
    let fusion = FusionOperator::new(&samplers, prepared.n_points, mode)?;
    let views: Vec<_> = maps.iter().map(|m| m.data.view()).collect();
    let teacher_fused = fusion.apply(&views)?;
    Ok(TeacherViews {
        maps,
        fusion,
        teacher_fused,
    })
}

/// Tap-averaged student map of every view.
pub fn student_maps(
    tv: &TeacherViews,
    decoder: &DecoderConfig,
    student: &ParamSet<f32>,
) -> Result<Vec<FeatureMap<f32>>> {
    tv.maps
        .par_iter()
        .map(|m| aggregate_layers(&student_forward(m, decoder, student)?.0))
        .collect()
}

/// Teacher and student point features of one cloud, invisible points zero.
pub fn extract_features(
    tv: &TeacherViews,
    decoder: &DecoderConfig,
    student: &ParamSet<f32>,
) -> Result<FusedPointFeatures<f32>> {
    let maps = student_maps(tv, decoder, student)?;
    let views: Vec<_> = maps.iter().map(|m| m.data.view()).collect();
    let s = tv.fusion.apply(&views)?;
    Ok(FusedPointFeatures {
        teacher: tv.fusion.scatter_rows(tv.teacher_fused.view()),
        student: tv.fusion.scatter_rows(s.view()),
        visibility_count: tv.fusion.visibility_count.clone(),
    })
}

pub fn score_views(tv: &TeacherViews, decoder: &DecoderConfig, student: &ParamSet<f32>) -> Result<AnomalyResult> {
    Ok(anomaly_scores(&extract_features(tv, decoder, student)?))
}
