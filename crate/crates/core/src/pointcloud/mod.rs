//! Point clouds, normalization, PLY I/O and the synthetic shape generator.

mod ply;
mod synthetic;

pub use ply::{load_ply, save_ply, save_ply_colored, score_color};
pub use synthetic::{make_synthetic, Anomaly, AnomalyKind, ShapeKind};

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// `N x 3` positions with optional per-point anomaly labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    labels: Option<Vec<bool>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        Self::build(points, None)
    }

    pub fn with_labels(points: Vec<Vector3<f64>>, labels: Vec<bool>) -> Result<Self> {
        Self::build(points, Some(labels))
    }

    fn build(points: Vec<Vector3<f64>>, labels: Option<Vec<bool>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Data("N must be ≥ 1".into()));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::Data(format!("non-finite coordinate at vertex {i}")));
        }
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::Data(format!(
                    "label count {} does not match point count {}",
                    l.len(),
                    points.len()
                )));
            }
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false: a cloud holds at least one point.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[bool]> {
        self.labels.as_deref()
    }

    pub fn positive_count(&self) -> usize {
        self.labels.as_ref().map_or(0, |l| l.iter().filter(|&&x| x).count())
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let sum: Vector3<f64> = self.points.iter().sum();
        sum / self.points.len() as f64
    }

    /// Centers on the centroid and scales so that the largest point norm is 1.
    ///
    /// Returns the normalized cloud together with the applied center and scale,
    /// so `original = normalized * scale + center`.
    pub fn normalize(&self) -> (PointCloud, Vector3<f64>, f64) {
        let center = self.centroid();
        let max_norm = self.points.iter().map(|p| (p - center).norm()).fold(0.0_f64, f64::max);
        let scale = if max_norm > 0.0 { max_norm } else { 1.0 };
        let points = self.points.iter().map(|p| (p - center) / scale).collect();
        (
            PointCloud {
                points,
                labels: self.labels.clone(),
            },
            center,
            scale,
        )
    }
}

/// Training clouds (normal only) and labeled test clouds.
#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<PointCloud>,
    pub test: Vec<(PointCloud, bool)>,
}

impl DatasetSplit {
    pub fn new(train: Vec<PointCloud>, test: Vec<(PointCloud, bool)>) -> Result<Self> {
        if let Some(i) = train.iter().position(|c| c.positive_count() > 0) {
            return Err(Error::Data(format!("train cloud {i} carries anomalous point labels")));
        }
        Ok(Self { train, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    #[test]
    fn normalize_two_points() {
        let c = PointCloud::new(vec![v(1., 1., 1.), v(3., 1., 1.)]).unwrap();
        let (n, center, scale) = c.normalize();
        assert_eq!(center, v(2., 1., 1.));
        assert_eq!(scale, 1.0);
        assert_eq!(n.points(), &[v(-1., 0., 0.), v(1., 0., 0.)]);
    }

    #[test]
    fn normalize_single_point() {
        let c = PointCloud::new(vec![v(5., 5., 5.)]).unwrap();
        let (n, center, scale) = c.normalize();
        assert_eq!(n.points(), &[v(0., 0., 0.)]);
        assert_eq!(center, v(5., 5., 5.));
        assert_eq!(scale, 1.0);
    }

    #[test]
    fn normalize_unit_sphere_fixed_point() {
        let c = make_synthetic(ShapeKind::Sphere, 2000, None, 3).unwrap();
        let (once, _, _) = c.normalize();
        let (twice, center, scale) = once.normalize();
        assert!(center.norm() < 1e-12);
        assert!((scale - 1.0).abs() < 1e-12);
        for (a, b) in once.points().iter().zip(twice.points()) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(matches!(PointCloud::new(vec![]), Err(Error::Data(m)) if m.contains("N must be ≥ 1")));
        let err = PointCloud::new(vec![v(0., 0., 0.), v(f64::NAN, 0., 0.)]).unwrap_err();
        assert!(err.to_string().contains("vertex 1"));
        assert!(PointCloud::with_labels(vec![v(0., 0., 0.)], vec![true, false]).is_err());
    }

    #[test]
    fn dataset_rejects_labeled_train_cloud() {
        let bad = PointCloud::with_labels(vec![v(0., 0., 0.)], vec![true]).unwrap();
        assert!(DatasetSplit::new(vec![bad], vec![]).is_err());
    }
}
