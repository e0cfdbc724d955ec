//! On-disk view bundle: one directory per cloud holding
//! `view_{k:02}.png`, `view_{k:02}.depth.f32`, `correspondence.bin` and `meta.json`.

use std::io::Cursor;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use super::camera::{CameraIntrinsics, Pose};
use super::render::{depth_to_intensity, intensity_to_image, Correspondence, ViewRender, EMPTY_OWNER};
use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    /// Row-major 3x3 rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        let r = &p.rotation;
        Self {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl PoseRecord {
    pub fn to_pose(&self) -> Result<Pose> {
        Pose::new(
            Matrix3::from_row_slice(&self.rotation),
            Vector3::from_row_slice(&self.translation),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub intrinsics: CameraIntrinsics,
    pub poses: Vec<PoseRecord>,
    pub resolution: usize,
    pub input_resolution: usize,
    pub normalization_center: [f64; 3],
    pub normalization_scale: f64,
    pub n_points: usize,
    pub content_hash: String,
}

pub fn view_png_name(k: usize) -> String {
    format!("view_{k:02}.png")
}

pub fn view_depth_name(k: usize) -> String {
    format!("view_{k:02}.depth.f32")
}

/// 8-bit grayscale PNG of the first channel, `intensity * 255` rounded half up.
pub fn encode_png(image: ArrayView3<'_, f32>) -> Result<Vec<u8>> {
    let (h, w, _) = image.dim();
    let pixels: Vec<u8> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .map(|(r, c)| (image[(r, c, 0)] as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| Error::Logic("png buffer size mismatch".into()))?;
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("png encode: {e}")))?;
    Ok(out)
}

pub fn decode_png(path: &Path) -> Result<image::GrayImage> {
    let bytes = read_file(path)?;
    image::load_from_memory(&bytes)
        .map(|i| i.to_luma8())
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn encode_correspondences(views: &[Vec<Correspondence>]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for view in views {
        out.extend_from_slice(&(view.len() as u32).to_le_bytes());
        for c in view {
            let (u, v) = (u16::try_from(c.u), u16::try_from(c.v));
            let (Ok(u), Ok(v)) = (u, v) else {
                return Err(Error::Data(format!("pixel ({}, {}) exceeds u16", c.u, c.v)));
            };
            out.extend_from_slice(&c.point.to_le_bytes());
            out.extend_from_slice(&u.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_correspondences(bytes: &[u8], n_views: usize) -> Result<Vec<Vec<Correspondence>>> {
    let truncated = || Error::Data("correspondence.bin is truncated".into());
    let mut pos = 0;
    let mut views = Vec::with_capacity(n_views);
    for _ in 0..n_views {
        let count = u32::from_le_bytes(bytes.get(pos..pos + 4).ok_or_else(truncated)?.try_into().unwrap()) as usize;
        pos += 4;
        let body = bytes.get(pos..pos + count * 8).ok_or_else(truncated)?;
        views.push(
            body.chunks_exact(8)
                .map(|b| Correspondence {
                    point: u32::from_le_bytes(b[0..4].try_into().unwrap()),
                    u: u16::from_le_bytes(b[4..6].try_into().unwrap()) as u32,
                    v: u16::from_le_bytes(b[6..8].try_into().unwrap()) as u32,
                })
                .collect(),
        );
        pos += count * 8;
    }
    if pos != bytes.len() {
        return Err(Error::Data("correspondence.bin has trailing bytes".into()));
    }
    Ok(views)
}

/// Writes the bundle. `inputs` are the downsampled network input images, one per view.
pub fn write_bundle(
    dir: &Path,
    meta: &BundleMeta,
    renders: &[ViewRender],
    inputs: &[ndarray::Array3<f32>],
) -> Result<()> {
    for (k, (render, input)) in renders.iter().zip(inputs).enumerate() {
        write_atomic(&dir.join(view_png_name(k)), &encode_png(input.view())?)?;
        let mut raw = Vec::with_capacity(render.depth.len() * 4);
        for z in render.depth.iter() {
            raw.extend_from_slice(&(*z as f32).to_le_bytes());
        }
        write_atomic(&dir.join(view_depth_name(k)), &raw)?;
    }
    let corr: Vec<_> = renders.iter().map(ViewRender::correspondences).collect();
    write_atomic(&dir.join("correspondence.bin"), &encode_correspondences(&corr)?)?;
    let json = serde_json::to_vec_pretty(meta).map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(&dir.join("meta.json"), &json)
}

pub fn read_meta(dir: &Path) -> Result<BundleMeta> {
    let bytes = read_file(&dir.join("meta.json"))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))
}

/// Reads a bundle back into renders. Depth comes back at float32 precision.
pub fn read_bundle(dir: &Path) -> Result<(BundleMeta, Vec<ViewRender>)> {
    let meta = read_meta(dir)?;
    let (w, h) = (meta.intrinsics.width, meta.intrinsics.height);
    let n_views = meta.poses.len();
    let corr = decode_correspondences(&read_file(&dir.join("correspondence.bin"))?, n_views)?;
    let mut renders = Vec::with_capacity(n_views);
    for (k, view) in corr.into_iter().enumerate() {
        let raw = read_file(&dir.join(view_depth_name(k)))?;
        if raw.len() != w * h * 4 {
            return Err(Error::Data(format!("{} has the wrong size", view_depth_name(k))));
        }
        let depth = Array2::from_shape_vec(
            (h, w),
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
        )
        .unwrap();
        let mut owner = Array2::from_elem((h, w), EMPTY_OWNER);
        for c in view {
            let cell = (c.v as usize, c.u as usize);
            if cell.0 >= h || cell.1 >= w || !depth[cell].is_finite() {
                return Err(Error::Data(format!("stale correspondence in view {k}")));
            }
            owner[cell] = c.point as i32;
        }
        let image = intensity_to_image(depth_to_intensity(depth.view()).view());
        renders.push(ViewRender {
            depth,
            image,
            owner,
            pose_index: k,
        });
    }
    Ok((meta, renders))
}
