use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;

use super::camera::{project_point, CameraIntrinsics, Pose};
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;

pub const EMPTY_OWNER: i32 = -1;

/// One rendered view: z-buffered depth, its intensity image and the owning
/// point of every pixel. Grids are indexed `[row (v), column (u)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRender {
    pub depth: Array2<f64>,
    pub image: Array3<f32>,
    pub owner: Array2<i32>,
    pub pose_index: usize,
}

impl ViewRender {
    pub fn width(&self) -> usize {
        self.depth.ncols()
    }

    pub fn height(&self) -> usize {
        self.depth.nrows()
    }

    pub fn occupied_pixels(&self) -> usize {
        self.owner.iter().filter(|&&o| o != EMPTY_OWNER).count()
    }

    /// Visible points of this view, ordered by point index.
    pub fn correspondences(&self) -> Vec<Correspondence> {
        let mut out: Vec<Correspondence> = self
            .owner
            .indexed_iter()
            .filter(|(_, &o)| o != EMPTY_OWNER)
            .map(|((v, u), &o)| Correspondence {
                point: o as u32,
                u: u as u32,
                v: v as u32,
            })
            .collect();
        out.sort_unstable_by_key(|c| c.point);
        out
    }
}

/// A point visible in a view and the pixel it owns there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Correspondence {
    pub point: u32,
    pub u: u32,
    pub v: u32,
}

/// Per-view visible-point lists for a whole pose set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub views: Vec<Vec<Correspondence>>,
}

impl CorrespondenceSet {
    pub fn from_renders(renders: &[ViewRender]) -> Self {
        Self {
            views: renders.iter().map(ViewRender::correspondences).collect(),
        }
    }

    /// How many views see each point.
    pub fn visibility_counts(&self, n_points: usize) -> Vec<u32> {
        let mut counts = vec![0u32; n_points];
        for view in &self.views {
            for c in view {
                counts[c.point as usize] += 1;
            }
        }
        counts
    }
}

/// Integer pixel of a continuous coordinate, rounding halves down.
#[inline]
pub fn pixel_index(x: f64) -> i64 {
    (x - 0.5).ceil() as i64
}

/// Single-pixel z-buffer rasterization. Ties on depth keep the lower point index.
pub fn render_view(cloud: &PointCloud, pose: &Pose, k: &CameraIntrinsics, pose_index: usize) -> ViewRender {
    let (w, h) = (k.width, k.height);
    let mut depth = Array2::from_elem((h, w), f64::INFINITY);
    let mut owner = Array2::from_elem((h, w), EMPTY_OWNER);
    for (i, p) in cloud.points().iter().enumerate() {
        let Ok(proj) = project_point(p, pose, k) else {
            continue;
        };
        if !(proj.z > 0.0) {
            continue;
        }
        let (pu, pv) = (pixel_index(proj.u), pixel_index(proj.v));
        if pu < 0 || pv < 0 || pu >= w as i64 || pv >= h as i64 {
            continue;
        }
        let cell = (pv as usize, pu as usize);
        if proj.z < depth[cell] {
            depth[cell] = proj.z;
            owner[cell] = i as i32;
        }
    }
    let image = intensity_to_image(depth_to_intensity(depth.view()).view());
    ViewRender {
        depth,
        image,
        owner,
        pose_index,
    }
}

/// Renders every pose in parallel.
pub fn render_views(cloud: &PointCloud, poses: &[Pose], k: &CameraIntrinsics) -> Vec<ViewRender> {
    poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| render_view(cloud, pose, k, i))
        .collect()
}

/// Min-max normalized inverse depth over occupied pixels; empty pixels are 0
/// and a constant-depth view maps occupied pixels to 1.
pub fn depth_to_intensity(depth: ArrayView2<'_, f64>) -> Array2<f32> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &z in depth.iter().filter(|z| z.is_finite()) {
        lo = lo.min(z);
        hi = hi.max(z);
    }
    let range = hi - lo;
    depth.mapv(|z| {
        if !z.is_finite() {
            0.0
        } else if range > 0.0 {
            ((hi - z) / range) as f32
        } else {
            1.0
        }
    })
}

/// Replicates a single-channel grid to three channels.
pub fn intensity_to_image(intensity: ArrayView2<'_, f32>) -> Array3<f32> {
    let (h, w) = intensity.dim();
    Array3::from_shape_fn((h, w, 3), |(r, c, _)| intensity[(r, c)])
}

/// Block-mean pooling of an `H x W x C` image to `h x w x C`; `H`, `W` must be
/// integer multiples of `h`, `w`.
pub fn downsample(image: ArrayView3<'_, f32>, h: usize, w: usize) -> Result<Array3<f32>> {
    let (src_h, src_w, ch) = image.dim();
    if h == 0 || w == 0 || src_h % h != 0 || src_w % w != 0 {
        return Err(Error::Config(format!(
            "render resolution {src_h}x{src_w} is not an integer multiple of {h}x{w}; pick a multiple of {w}"
        )));
    }
    let (sy, sx) = (src_h / h, src_w / w);
    let norm = 1.0 / (sy * sx) as f64;
    let mut out = Array3::zeros((h, w, ch));
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let mut acc = 0.0_f64;
                for dy in 0..sy {
                    for dx in 0..sx {
                        acc += image[(r * sy + dy, c * sx + dx, k)] as f64;
                    }
                }
                out[(r, c, k)] = (acc * norm) as f32;
            }
        }
    }
    Ok(out)
}

/// Number of pixels whose first channel is exactly zero.
pub fn count_zero_pixels(image: ArrayView3<'_, f32>) -> usize {
    image.index_axis(Axis(2), 0).iter().filter(|&&x| x == 0.0).count()
}

/// Zero pixels lying inside the silhouette: a zero pixel counts when its row
/// has non-zero pixels on both sides and its column has them above and below.
pub fn count_interior_zero_pixels(image: ArrayView3<'_, f32>) -> usize {
    let plane = image.index_axis(Axis(2), 0);
    let (h, w) = plane.dim();
    let span = |it: &mut dyn Iterator<Item = f32>| {
        let nz: Vec<usize> = it.enumerate().filter(|(_, x)| *x != 0.0).map(|(i, _)| i).collect();
        nz.first().copied().zip(nz.last().copied())
    };
    let rows: Vec<_> = (0..h).map(|r| span(&mut plane.row(r).iter().copied())).collect();
    let cols: Vec<_> = (0..w).map(|c| span(&mut plane.column(c).iter().copied())).collect();
    let inside = |i: usize, s: Option<(usize, usize)>| s.is_some_and(|(a, b)| a < i && i < b);
    plane
        .indexed_iter()
        .filter(|&((r, c), &x)| x == 0.0 && inside(c, rows[r]) && inside(r, cols[c]))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::generate_view_poses;
    use nalgebra::{Matrix3, Vector3};

    fn front_pose() -> Pose {
        Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 3.0)).unwrap()
    }

    #[test]
    fn interior_zero_pixels_ignore_background() {
        let mut img = Array3::<f32>::zeros((5, 5, 1));
        for r in 1..4 {
            for c in 1..4 {
                img[(r, c, 0)] = 1.0;
            }
        }
        assert_eq!(count_interior_zero_pixels(img.view()), 0);
        img[(2, 2, 0)] = 0.0;
        assert_eq!(count_interior_zero_pixels(img.view()), 1);
        img[(1, 1, 0)] = 0.0;
        assert_eq!(count_interior_zero_pixels(img.view()), 1);
        assert_eq!(count_zero_pixels(img.view()), 18);
    }

    #[test]
    fn zbuffer_keeps_nearest() {
        let cloud = PointCloud::new(vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.0, 0.0, -1.0)]).unwrap();
        let k = CameraIntrinsics::for_resolution(672);
        let r = render_view(&cloud, &front_pose(), &k, 0);
        assert_eq!(r.owner[(336, 336)], 1);
        assert_eq!(r.depth[(336, 336)], 2.0);
        assert_eq!(r.occupied_pixels(), 1);
    }

    #[test]
    fn ties_keep_lower_index() {
        let p = Vector3::new(0.01, 0.02, 0.0);
        let cloud = PointCloud::new(vec![p, p, p]).unwrap();
        let r = render_view(&cloud, &front_pose(), &CameraIntrinsics::for_resolution(224), 0);
        assert_eq!(r.occupied_pixels(), 1);
        assert_eq!(r.correspondences()[0].point, 0);
    }

    #[test]
    fn single_point_single_pixel() {
        let cloud = PointCloud::new(vec![Vector3::new(0.2, -0.1, 0.3)]).unwrap();
        let r = render_view(&cloud, &front_pose(), &CameraIntrinsics::for_resolution(672), 0);
        assert_eq!(r.occupied_pixels(), 1);
        let c = r.correspondences();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].point, 0);
        assert_eq!(r.image[(c[0].v as usize, c[0].u as usize, 0)], 1.0);
    }

    #[test]
    fn round_half_down() {
        assert_eq!(pixel_index(2.5), 2);
        assert_eq!(pixel_index(2.5000001), 3);
        assert_eq!(pixel_index(-0.5), -1);
        assert_eq!(pixel_index(-0.4), 0);
        assert_eq!(pixel_index(3.0), 3);
    }

    #[test]
    fn owner_and_depth_agree() {
        let cloud = crate::pointcloud::make_synthetic(crate::pointcloud::ShapeKind::Sphere, 3000, None, 1).unwrap();
        let k = CameraIntrinsics::for_resolution(224);
        for r in render_views(&cloud, &generate_view_poses(4, 3.0), &k) {
            for ((v, u), &o) in r.owner.indexed_iter() {
                assert_eq!(o == EMPTY_OWNER, r.depth[(v, u)].is_infinite());
                for ch in 1..3 {
                    assert_eq!(r.image[(v, u, 0)], r.image[(v, u, ch)]);
                }
            }
        }
    }

    #[test]
    fn intensity_map() {
        let d = ndarray::arr2(&[[2.0, 4.0], [f64::INFINITY, 3.0]]);
        let i = depth_to_intensity(d.view());
        assert_eq!(i, ndarray::arr2(&[[1.0_f32, 0.0], [0.0, 0.5]]));
        let empty = Array2::from_elem((3, 3), f64::INFINITY);
        assert!(depth_to_intensity(empty.view()).iter().all(|&x| x == 0.0));
        let flat = ndarray::arr2(&[[2.0, f64::INFINITY]]);
        assert_eq!(depth_to_intensity(flat.view()), ndarray::arr2(&[[1.0_f32, 0.0]]));
    }

    #[test]
    fn block_mean() {
        let img = Array3::from_shape_vec((2, 2, 1), vec![0.0_f32, 0.0, 1.0, 1.0]).unwrap();
        let out = downsample(img.view(), 1, 1).unwrap();
        assert_eq!(out[(0, 0, 0)], 0.5);
        let c = Array3::from_elem((6, 9, 3), 0.25_f32);
        assert!(downsample(c.view(), 2, 3).unwrap().iter().all(|&x| x == 0.25));
        let err = downsample(Array3::<f32>::zeros((500, 500, 3)).view(), 224, 224).unwrap_err();
        assert!(err.to_string().contains("multiple of 224"));
    }
}
