//! Patch features to pixels to points: bilinear upsampling, back-projection
//! through the correspondence set, averaging across views, and scoring.

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::projection::Correspondence;
use crate::tensor::Real;

/// Source coordinate of pixel `x` on a grid of `g` cells spanning `n` pixels,
/// with cell centers at their geometric pixel centers.
fn axis_weights(x: usize, n: usize, g: usize) -> (usize, usize, f64) {
    let s = ((x as f64 + 0.5) * g as f64 / n as f64 - 0.5).clamp(0.0, (g - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(g - 1);
    (i0, i1, s - i0 as f64)
}

/// The four patch tokens and weights that bilinearly produce pixel `(u, v)`
/// of a `height x width` image from a `grid_h x grid_w` patch grid.
pub fn bilinear_taps(
    u: usize,
    v: usize,
    width: usize,
    height: usize,
    grid_w: usize,
    grid_h: usize,
) -> [(usize, f64); 4] {
    let (c0, c1, fx) = axis_weights(u, width, grid_w);
    let (r0, r1, fy) = axis_weights(v, height, grid_h);
    [
        (r0 * grid_w + c0, (1.0 - fy) * (1.0 - fx)),
        (r0 * grid_w + c1, (1.0 - fy) * fx),
        (r1 * grid_w + c0, fy * (1.0 - fx)),
        (r1 * grid_w + c1, fy * fx),
    ]
}

/// Bilinear upsampling of a patch grid to a `height x width x channels` pixel grid.
pub fn upsample_patch_features<T: Real>(map: &FeatureMap<T>, height: usize, width: usize) -> Array3<T> {
    let c = map.channels();
    let mut out = Array3::zeros((height, width, c));
    for v in 0..height {
        for u in 0..width {
            let taps = bilinear_taps(u, v, width, height, map.grid_w, map.grid_h);
            let mut px = out.slice_mut(ndarray::s![v, u, ..]);
            for (idx, w) in taps {
                if w != 0.0 {
                    px.scaled_add(T::lit(w), &map.data.row(idx));
                }
            }
        }
    }
    out
}

/// Features of one view's visible points: row `r` belongs to point `points[r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPointFeatures<T> {
    pub points: Vec<u32>,
    pub teacher: Array2<T>,
    pub student: Array2<T>,
}

/// Looks up each corresponding point's feature at its pixel.
pub fn backproject_view<T: Real>(
    correspondences: &[Correspondence],
    teacher: &Array3<T>,
    student: &Array3<T>,
) -> Result<ViewPointFeatures<T>> {
    let (h, w, c) = teacher.dim();
    if student.dim() != (h, w, c) {
        return Err(Error::Config("teacher and student pixel grids differ in shape".into()));
    }
    let mut out = ViewPointFeatures {
        points: Vec::with_capacity(correspondences.len()),
        teacher: Array2::zeros((correspondences.len(), c)),
        student: Array2::zeros((correspondences.len(), c)),
    };
    for (r, corr) in correspondences.iter().enumerate() {
        let (u, v) = (corr.u as usize, corr.v as usize);
        if u >= w || v >= h {
            return Err(Error::Logic(format!(
                "stale correspondence: pixel ({u}, {v}) outside a {w}x{h} grid"
            )));
        }
        out.points.push(corr.point);
        out.teacher.row_mut(r).assign(&teacher.slice(ndarray::s![v, u, ..]));
        out.student.row_mut(r).assign(&student.slice(ndarray::s![v, u, ..]));
    }
    Ok(out)
}

/// Precomputed bilinear lookups for one view, so per-point features can be
/// read straight off the patch grid without materializing the pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSampler {
    pub points: Vec<u32>,
    taps: Vec<[(u32, f32); 4]>,
    grid_tokens: usize,
}

impl ViewSampler {
    pub fn new(
        correspondences: &[Correspondence],
        width: usize,
        height: usize,
        grid_w: usize,
        grid_h: usize,
    ) -> Result<Self> {
        let mut points = Vec::with_capacity(correspondences.len());
        let mut taps = Vec::with_capacity(correspondences.len());
        for corr in correspondences {
            let (u, v) = (corr.u as usize, corr.v as usize);
            if u >= width || v >= height {
                return Err(Error::Logic(format!(
                    "stale correspondence: pixel ({u}, {v}) outside a {width}x{height} grid"
                )));
            }
            points.push(corr.point);
            let t = bilinear_taps(u, v, width, height, grid_w, grid_h);
            taps.push(t.map(|(i, w)| (i as u32, w as f32)));
        }
        Ok(Self {
            points,
            taps,
            grid_tokens: grid_w * grid_h,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Per-point features, one row per visible point.
    pub fn sample<T: Real>(&self, map: ArrayView2<'_, T>) -> Array2<T> {
        let mut out = Array2::zeros((self.len(), map.ncols()));
        for (mut row, taps) in out.rows_mut().into_iter().zip(&self.taps) {
            for &(idx, w) in taps {
                if w != 0.0 {
                    row.scaled_add(T::lit(w as f64), &map.row(idx as usize));
                }
            }
        }
        out
    }

    /// Adjoint of [`ViewSampler::sample`]: scatters per-point gradients onto the patch grid.
    pub fn sample_backward<T: Real>(&self, d_rows: ArrayView2<'_, T>) -> Array2<T> {
        let mut out = Array2::zeros((self.grid_tokens, d_rows.ncols()));
        for (row, taps) in d_rows.rows().into_iter().zip(&self.taps) {
            for &(idx, w) in taps {
                if w != 0.0 {
                    out.row_mut(idx as usize).scaled_add(T::lit(w as f64), &row);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Average over the views in which each point is visible.
    #[default]
    VisibleOnly,
    /// Divide by the total number of views.
    AllViews,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedPointFeatures<T> {
    pub teacher: Array2<T>,
    pub student: Array2<T>,
    pub visibility_count: Vec<u32>,
}

impl<T: Real> FusedPointFeatures<T> {
    pub fn len(&self) -> usize {
        self.visibility_count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visibility_count.is_empty()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.visibility_count[i] > 0).collect()
    }

    pub fn invisible_count(&self) -> usize {
        self.visibility_count.iter().filter(|&&c| c == 0).count()
    }
}

fn fusion_divisor(count: u32, n_views: usize, mode: FusionMode) -> usize {
    match mode {
        FusionMode::VisibleOnly => count as usize,
        FusionMode::AllViews => n_views,
    }
}

/// Averages per-view point features, accumulating in view order.
pub fn fuse_views<T: Real>(
    views: &[ViewPointFeatures<T>],
    n_points: usize,
    mode: FusionMode,
) -> Result<FusedPointFeatures<T>> {
    let first = views
        .first()
        .ok_or_else(|| Error::Config("fusion needs at least one view".into()))?;
    let c = first.teacher.ncols();
    let mut teacher = Array2::<T>::zeros((n_points, c));
    let mut student = Array2::<T>::zeros((n_points, c));
    let mut visibility_count = vec![0u32; n_points];
    for (k, view) in views.iter().enumerate() {
        if view.teacher.ncols() != c || view.student.ncols() != c {
            return Err(Error::Config(format!("view {k} has a different channel count")));
        }
        for (r, &p) in view.points.iter().enumerate() {
            let p = p as usize;
            if p >= n_points {
                return Err(Error::Logic(format!("view {k} references point {p} of {n_points}")));
            }
            teacher.row_mut(p).scaled_add(T::one(), &view.teacher.row(r));
            student.row_mut(p).scaled_add(T::one(), &view.student.row(r));
            visibility_count[p] += 1;
        }
    }
    for (i, &count) in visibility_count.iter().enumerate() {
        if count > 0 {
            let d = T::from_usize(fusion_divisor(count, views.len(), mode)).unwrap();
            teacher.row_mut(i).mapv_inplace(|x| x / d);
            student.row_mut(i).mapv_inplace(|x| x / d);
        }
    }
    Ok(FusedPointFeatures {
        teacher,
        student,
        visibility_count,
    })
}

/// Adjoint of the student half of [`fuse_views`]: per-view row gradients.
pub fn fuse_views_backward<T: Real>(
    view_points: &[&[u32]],
    visibility_count: &[u32],
    mode: FusionMode,
    d_fused: ArrayView2<'_, T>,
) -> Vec<Array2<T>> {
    view_points
        .iter()
        .map(|points| {
            let mut d = Array2::zeros((points.len(), d_fused.ncols()));
            for (r, &p) in points.iter().enumerate() {
                let p = p as usize;
                let div = T::from_usize(fusion_divisor(visibility_count[p], view_points.len(), mode)).unwrap();
                d.row_mut(r).assign(&d_fused.row(p).mapv(|x| x / div));
            }
            d
        })
        .collect()
}

/// The whole patch-grids-to-fused-points map of one cloud as a sparse matrix.
/// Row `r` is visible point `points[r]`; columns index tokens of the stacked
/// per-view patch grids; weights already include the fusion divisor.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOperator {
    pub points: Vec<u32>,
    pub visibility_count: Vec<u32>,
    n_views: usize,
    grid_tokens: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f32>,
}

impl FusionOperator {
    pub fn new(samplers: &[ViewSampler], n_points: usize, mode: FusionMode) -> Result<Self> {
        let first = samplers
            .first()
            .ok_or_else(|| Error::Config("fusion needs at least one view".into()))?;
        let grid_tokens = first.grid_tokens;
        let mut visibility_count = vec![0u32; n_points];
        let mut nnz = vec![0usize; n_points];
        for (k, s) in samplers.iter().enumerate() {
            if s.grid_tokens != grid_tokens {
                return Err(Error::Config(format!("view {k} has a different patch grid")));
            }
            for (&p, taps) in s.points.iter().zip(&s.taps) {
                let p = p as usize;
                if p >= n_points {
                    return Err(Error::Logic(format!("view {k} references point {p} of {n_points}")));
                }
                visibility_count[p] += 1;
                nnz[p] += taps.iter().filter(|t| t.1 != 0.0).count();
            }
        }
        let points: Vec<u32> = (0..n_points as u32)
            .filter(|&p| visibility_count[p as usize] > 0)
            .collect();
        let mut row_of = vec![usize::MAX; n_points];
        let mut row_ptr = Vec::with_capacity(points.len() + 1);
        row_ptr.push(0);
        for (r, &p) in points.iter().enumerate() {
            row_of[p as usize] = r;
            row_ptr.push(row_ptr[r] + nnz[p as usize]);
        }
        let total = *row_ptr.last().unwrap();
        let mut cols = vec![0u32; total];
        let mut vals = vec![0f32; total];
        let mut fill = row_ptr[..points.len()].to_vec();
        for (k, s) in samplers.iter().enumerate() {
            for (&p, taps) in s.points.iter().zip(&s.taps) {
                let p = p as usize;
                let div = fusion_divisor(visibility_count[p], samplers.len(), mode) as f64;
                let r = row_of[p];
                for &(idx, w) in taps.iter().filter(|t| t.1 != 0.0) {
                    cols[fill[r]] = (k * grid_tokens) as u32 + idx;
                    vals[fill[r]] = (w as f64 / div) as f32;
                    fill[r] += 1;
                }
            }
        }
        Ok(Self {
            points,
            visibility_count,
            n_views: samplers.len(),
            grid_tokens,
            row_ptr,
            cols,
            vals,
        })
    }

    pub fn n_points(&self) -> usize {
        self.visibility_count.len()
    }

    pub fn n_visible(&self) -> usize {
        self.points.len()
    }

    fn check_maps<T>(&self, maps: &[ArrayView2<'_, T>]) -> Result<usize> {
        if maps.len() != self.n_views {
            return Err(Error::Config(format!("{} maps for {} views", maps.len(), self.n_views)));
        }
        let c = maps[0].ncols();
        if maps.iter().any(|m| m.nrows() != self.grid_tokens || m.ncols() != c) {
            return Err(Error::Config(
                "per-view maps do not share the operator's patch grid".into(),
            ));
        }
        Ok(c)
    }

    /// Fused features of the visible points, one row each.
    pub fn apply<T: Real>(&self, maps: &[ArrayView2<'_, T>]) -> Result<Array2<T>> {
        let c = self.check_maps(maps)?;
        let owned: Vec<Array2<T>> = maps.iter().map(|m| m.as_standard_layout().into_owned()).collect();
        let srcs: Vec<&[T]> = owned.iter().map(|m| m.as_slice().unwrap()).collect();
        let mut out = Array2::<T>::zeros((self.n_visible(), c));
        let dst = out.as_slice_mut().unwrap();
        for (r, row) in dst.chunks_exact_mut(c).enumerate() {
            for e in self.row_ptr[r]..self.row_ptr[r + 1] {
                let col = self.cols[e] as usize;
                let (k, t) = (col / self.grid_tokens, col % self.grid_tokens);
                let w = T::lit(self.vals[e] as f64);
                let src = &srcs[k][t * c..(t + 1) * c];
                for (o, &x) in row.iter_mut().zip(src) {
                    *o += w * x;
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`FusionOperator::apply`]: per-view patch-grid gradients.
    pub fn apply_transpose<T: Real>(&self, d: ArrayView2<'_, T>) -> Result<Vec<Array2<T>>> {
        if d.nrows() != self.n_visible() {
            return Err(Error::Config(format!(
                "{} gradient rows for {} visible points",
                d.nrows(),
                self.n_visible()
            )));
        }
        let c = d.ncols();
        let d = d.as_standard_layout();
        let src = d.as_slice().unwrap();
        let mut out = vec![vec![T::zero(); self.grid_tokens * c]; self.n_views];
        for r in 0..self.n_visible() {
            let g = &src[r * c..(r + 1) * c];
            for e in self.row_ptr[r]..self.row_ptr[r + 1] {
                let col = self.cols[e] as usize;
                let (k, t) = (col / self.grid_tokens, col % self.grid_tokens);
                let w = T::lit(self.vals[e] as f64);
                for (o, &x) in out[k][t * c..(t + 1) * c].iter_mut().zip(g) {
                    *o += w * x;
                }
            }
        }
        Ok(out
            .into_iter()
            .map(|v| Array2::from_shape_vec((self.grid_tokens, c), v).unwrap())
            .collect())
    }

    /// Expands visible-point rows to all points, zeros for invisible ones.
    pub fn scatter_rows<T: Real>(&self, rows: ArrayView2<'_, T>) -> Array2<T> {
        let mut full = Array2::zeros((self.n_points(), rows.ncols()));
        for (r, &p) in self.points.iter().enumerate() {
            full.row_mut(p as usize).assign(&rows.row(r));
        }
        full
    }
}

/// `1 - a.b / (|a| |b|)`, with a zero vector at distance 1.
pub fn cosine_distance<T: Real>(a: ndarray::ArrayView1<'_, T>, b: ndarray::ArrayView1<'_, T>) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0_f64, 0.0_f64, 0.0_f64);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (x.to_f64().unwrap(), y.to_f64().unwrap());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 1.0;
    }
    (1.0 - ab / (aa.sqrt() * bb.sqrt())).clamp(0.0, 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyResult {
    pub point_scores: Vec<f64>,
    pub object_score: f64,
    pub invisible_points: usize,
}

/// Cosine distance per visible point; invisible points score 0; the object
/// score is the maximum.
pub fn anomaly_scores<T: Real>(fused: &FusedPointFeatures<T>) -> AnomalyResult {
    let point_scores: Vec<f64> = (0..fused.len())
        .map(|i| {
            if fused.visibility_count[i] == 0 {
                0.0
            } else {
                cosine_distance(fused.teacher.row(i), fused.student.row(i))
            }
        })
        .collect();
    let object_score = point_scores.iter().copied().fold(0.0, f64::max);
    AnomalyResult {
        point_scores,
        object_score,
        invisible_points: fused.invisible_count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn map(h: usize, w: usize, data: Vec<f64>, c: usize) -> FeatureMap<f64> {
        FeatureMap::new(h, w, Array2::from_shape_vec((h * w, c), data).unwrap()).unwrap()
    }

    #[test]
    fn constant_and_single_patch_grids() {
        let m = map(2, 2, vec![3.0; 8], 2);
        let up = upsample_patch_features(&m, 6, 6);
        assert!(up.iter().all(|&v| (v - 3.0).abs() < 1e-12));
        let one = map(1, 1, vec![1.0, -2.0], 2);
        let up = upsample_patch_features(&one, 5, 7);
        for v in 0..5 {
            for u in 0..7 {
                assert_eq!(up[(v, u, 0)], 1.0);
                assert_eq!(up[(v, u, 1)], -2.0);
            }
        }
    }

    #[test]
    fn midpoint_between_patch_centers() {
        let m = map(2, 2, vec![0.0, 4.0, 2.0, 6.0], 1);
        // Three pixels over two patches: the middle pixel center sits halfway
        // between the patch centers at 0.75 and 2.25.
        let up = upsample_patch_features(&m, 2, 3);
        assert!((up[(0, 1, 0)] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn backprojection_lookup_and_stale_pixels() {
        let t = Array3::from_shape_fn((2, 3, 2), |(v, u, c)| (v * 10 + u * 2 + c) as f64);
        let s = t.mapv(|x| -x);
        let corr = vec![Correspondence { point: 4, u: 2, v: 1 }];
        let out = backproject_view(&corr, &t, &s).unwrap();
        assert_eq!(out.points, vec![4]);
        assert_eq!(out.teacher.row(0), array![14.0, 15.0]);
        assert_eq!(out.student.row(0), array![-14.0, -15.0]);
        let stale = vec![Correspondence { point: 0, u: 3, v: 0 }];
        assert!(matches!(backproject_view(&stale, &t, &s), Err(Error::Logic(_))));
    }

    #[test]
    fn sampler_matches_upsample_then_lookup() {
        let m = map(2, 3, (0..12).map(|x| (x as f64).sin()).collect(), 2);
        let corr: Vec<_> = (0..12u32)
            .map(|i| Correspondence {
                point: i,
                u: (i * 5) % 9,
                v: (i * 7) % 6,
            })
            .collect();
        let up = upsample_patch_features(&m, 6, 9);
        let full = backproject_view(&corr, &up, &up).unwrap();
        let sampler = ViewSampler::new(&corr, 9, 6, 3, 2).unwrap();
        let fast = sampler.sample(m.data.view());
        for (a, b) in fast.iter().zip(full.teacher.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn operator_matches_reference_fusion() {
        let maps: Vec<FeatureMap<f64>> = (0..3)
            .map(|k| map(2, 3, (0..18).map(|x| ((x * (k + 2)) as f64).cos()).collect(), 3))
            .collect();
        let samplers: Vec<ViewSampler> = (0..3u32)
            .map(|k| {
                let corr: Vec<_> = (0..7u32)
                    .filter(|p| (p + k) % 3 != 0)
                    .map(|p| Correspondence {
                        point: p,
                        u: (p * 3 + k) % 9,
                        v: (p + 2 * k) % 6,
                    })
                    .collect();
                ViewSampler::new(&corr, 9, 6, 3, 2).unwrap()
            })
            .collect();
        for mode in [FusionMode::VisibleOnly, FusionMode::AllViews] {
            let views: Vec<_> = samplers
                .iter()
                .zip(&maps)
                .map(|(s, m)| ViewPointFeatures {
                    points: s.points.clone(),
                    teacher: s.sample(m.data.view()),
                    student: s.sample(m.data.view()),
                })
                .collect();
            let reference = fuse_views(&views, 8, mode).unwrap();
            let op = FusionOperator::new(&samplers, 8, mode).unwrap();
            let views_in: Vec<_> = maps.iter().map(|m| m.data.view()).collect();
            let fast = op.scatter_rows(op.apply(&views_in).unwrap().view());
            assert_eq!(op.visibility_count, reference.visibility_count);
            for (a, b) in fast.iter().zip(reference.teacher.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fusion_two_views_and_single_view() {
        let v1 = ViewPointFeatures {
            points: vec![0, 1],
            teacher: array![[1.0, 0.0], [5.0, 5.0]],
            student: array![[2.0, 0.0], [1.0, 1.0]],
        };
        let v2 = ViewPointFeatures {
            points: vec![0],
            teacher: array![[3.0, 2.0]],
            student: array![[0.0, 2.0]],
        };
        let f = fuse_views(&[v1.clone(), v2.clone()], 3, FusionMode::VisibleOnly).unwrap();
        assert_eq!(f.teacher.row(0), array![2.0, 1.0]);
        assert_eq!(f.student.row(0), array![1.0, 1.0]);
        assert_eq!(f.teacher.row(1), array![5.0, 5.0]);
        assert_eq!(f.visibility_count, vec![2, 1, 0]);
        assert_eq!(f.teacher.row(2), Array1::<f64>::zeros(2));
        let all = fuse_views(&[v1, v2], 3, FusionMode::AllViews).unwrap();
        assert_eq!(all.teacher.row(1), array![2.5, 2.5]);
    }

    #[test]
    fn scores_extremes() {
        let t = array![[1.0, 2.0], [0.5, -1.0], [3.0, 3.0]];
        let mut s = t.clone();
        let f = FusedPointFeatures {
            teacher: t.clone(),
            student: s.clone(),
            visibility_count: vec![1, 2, 0],
        };
        let r = anomaly_scores(&f);
        assert!(r.point_scores.iter().all(|&x| x.abs() < 1e-12));
        assert_eq!(r.invisible_points, 1);
        s.row_mut(1).mapv_inplace(|x| -x);
        let r = anomaly_scores(&FusedPointFeatures {
            teacher: t,
            student: s,
            visibility_count: vec![1, 2, 0],
        });
        assert!((r.point_scores[1] - 2.0).abs() < 1e-12);
        assert_eq!(r.object_score, r.point_scores[1]);
        assert_eq!(r.point_scores[2], 0.0);
    }

    #[test]
    fn cosine_distance_cases() {
        let a = array![1.0, 0.0];
        assert_eq!(cosine_distance(a.view(), a.view()), 0.0);
        assert!((cosine_distance(a.view(), array![0.0, 3.0].view()) - 1.0).abs() < 1e-15);
        assert!((cosine_distance(a.view(), array![-2.0, 0.0].view()) - 2.0).abs() < 1e-15);
        assert_eq!(cosine_distance(a.view(), array![0.0, 0.0].view()), 1.0);
    }
}
