//! Surface-sampled primitive shapes with optional dent/bulge defects.

use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};

const BOX_HALF: [f64; 3] = [0.7, 0.55, 0.45];
const CYL_RADIUS: f64 = 0.6;
const CYL_HALF_HEIGHT: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Box,
    Cylinder,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Box => "box",
            ShapeKind::Cylinder => "cylinder",
        }
    }

    /// Largest distance from the shape center to its surface.
    pub fn extent(self) -> f64 {
        match self {
            ShapeKind::Sphere => 1.0,
            ShapeKind::Box => BOX_HALF.iter().map(|h| h * h).sum::<f64>().sqrt(),
            ShapeKind::Cylinder => (CYL_RADIUS * CYL_RADIUS + CYL_HALF_HEIGHT * CYL_HALF_HEIGHT).sqrt(),
        }
    }

    /// A surface point and its outward unit normal.
    fn sample(self, rng: &mut ChaCha8Rng) -> (Vector3<f64>, Vector3<f64>) {
        match self {
            ShapeKind::Sphere => loop {
                let v = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                let n = v.norm();
                if n > 1e-12 {
                    let p = v / n;
                    return (p, p);
                }
            },
            ShapeKind::Box => {
                let [a, b, c] = BOX_HALF;
                // face areas for the +-x, +-y, +-z pairs
                let areas = [b * c, a * c, a * b];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut axis = 2;
                for (i, area) in areas.iter().enumerate() {
                    if pick < *area {
                        axis = i;
                        break;
                    }
                    pick -= area;
                }
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut p = Vector3::zeros();
                for k in 0..3 {
                    p[k] = if k == axis {
                        sign * BOX_HALF[k]
                    } else {
                        (2.0 * rng.random::<f64>() - 1.0) * BOX_HALF[k]
                    };
                }
                let mut n = Vector3::zeros();
                n[axis] = sign;
                (p, n)
            }
            ShapeKind::Cylinder => {
                let side = 2.0 * std::f64::consts::PI * CYL_RADIUS * 2.0 * CYL_HALF_HEIGHT;
                let cap = std::f64::consts::PI * CYL_RADIUS * CYL_RADIUS;
                let pick = rng.random::<f64>() * (side + 2.0 * cap);
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                if pick < side {
                    let z = (2.0 * rng.random::<f64>() - 1.0) * CYL_HALF_HEIGHT;
                    let n = Vector3::new(theta.cos(), theta.sin(), 0.0);
                    (Vector3::new(CYL_RADIUS * n.x, CYL_RADIUS * n.y, z), n)
                } else {
                    let r = CYL_RADIUS * rng.random::<f64>().sqrt();
                    let sign = if pick < side + cap { 1.0 } else { -1.0 };
                    (
                        Vector3::new(r * theta.cos(), r * theta.sin(), sign * CYL_HALF_HEIGHT),
                        Vector3::new(0.0, 0.0, sign),
                    )
                }
            }
        }
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "box" => Ok(Self::Box),
            "cylinder" => Ok(Self::Cylinder),
            other => Err(Error::Config(format!(
                "unknown shape `{other}` (expected sphere, box or cylinder)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    Dent,
    Bulge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anomaly {
    pub kind: AnomalyKind,
    /// Euclidean radius of the affected surface patch.
    pub radius: f64,
    /// Displacement magnitude along the surface normal.
    pub depth: f64,
}

impl Anomaly {
    fn signed_depth(&self) -> f64 {
        match self.kind {
            AnomalyKind::Dent => -self.depth,
            AnomalyKind::Bulge => self.depth,
        }
    }
}

/// Samples `n_points` uniformly over the shape surface. With an anomaly, every
/// point within `radius` of a random surface center is pushed along its normal
/// by the signed depth and labeled; deterministic per seed.
pub fn make_synthetic(kind: ShapeKind, n_points: usize, anomaly: Option<Anomaly>, rng_seed: u64) -> Result<PointCloud> {
    if n_points < 100 {
        return Err(Error::Config(format!("n_points must be ≥ 100, got {n_points}")));
    }
    if let Some(a) = &anomaly {
        if !(a.radius > 0.0 && a.radius < kind.extent()) {
            return Err(Error::Config(format!(
                "anomaly radius {} must lie in (0, {:.3})",
                a.radius,
                kind.extent()
            )));
        }
        if !(a.depth >= 0.0 && a.depth.is_finite()) {
            return Err(Error::Config(format!("anomaly depth {} must be ≥ 0", a.depth)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let samples: Vec<_> = (0..n_points).map(|_| kind.sample(&mut rng)).collect();
    let center = kind.sample(&mut rng).0;

    let mut points = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    for (p, n) in samples {
        match &anomaly {
            Some(a) if a.depth > 0.0 && (p - center).norm() < a.radius => {
                points.push(p + n * a.signed_depth());
                labels.push(true);
            }
            _ => {
                points.push(p);
                labels.push(false);
            }
        }
    }
    PointCloud::with_labels(points, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dent(radius: f64, depth: f64) -> Option<Anomaly> {
        Some(Anomaly {
            kind: AnomalyKind::Dent,
            radius,
            depth,
        })
    }

    #[test]
    fn plain_sphere_on_unit_sphere() {
        let c = make_synthetic(ShapeKind::Sphere, 1000, None, 1).unwrap();
        assert_eq!(c.positive_count(), 0);
        assert!(c.points().iter().all(|p| (p.norm() - 1.0).abs() < 1e-6));
    }

    #[test]
    fn dented_sphere_labels_match_geometry() {
        let c = make_synthetic(ShapeKind::Sphere, 5000, dent(0.2, 0.1), 2).unwrap();
        assert!(c.positive_count() > 0);
        for (p, &l) in c.points().iter().zip(c.labels().unwrap()) {
            if l {
                assert!(p.norm() < 1.0);
            } else {
                assert!((p.norm() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn same_seed_same_cloud() {
        for kind in [ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Cylinder] {
            let a = make_synthetic(kind, 500, dent(0.3, 0.05), 9).unwrap();
            let b = make_synthetic(kind, 500, dent(0.3, 0.05), 9).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn bulge_pushes_outward() {
        let a = Some(Anomaly {
            kind: AnomalyKind::Bulge,
            radius: 0.3,
            depth: 0.1,
        });
        let c = make_synthetic(ShapeKind::Sphere, 3000, a, 4).unwrap();
        for (p, &l) in c.points().iter().zip(c.labels().unwrap()) {
            if l {
                assert!((p.norm() - 1.1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn box_and_cylinder_lie_on_surface() {
        let b = make_synthetic(ShapeKind::Box, 2000, None, 5).unwrap();
        for p in b.points() {
            let on_face = (0..3).any(|k| (p[k].abs() - BOX_HALF[k]).abs() < 1e-12);
            let inside = (0..3).all(|k| p[k].abs() <= BOX_HALF[k] + 1e-12);
            assert!(on_face && inside);
        }
        let c = make_synthetic(ShapeKind::Cylinder, 2000, None, 5).unwrap();
        for p in c.points() {
            let r = (p.x * p.x + p.y * p.y).sqrt();
            let side = (r - CYL_RADIUS).abs() < 1e-9 && p.z.abs() <= CYL_HALF_HEIGHT;
            let cap = (p.z.abs() - CYL_HALF_HEIGHT).abs() < 1e-12 && r <= CYL_RADIUS + 1e-12;
            assert!(side || cap);
        }
    }

    #[test]
    fn invalid_parameters() {
        assert!(make_synthetic(ShapeKind::Sphere, 99, None, 0).is_err());
        assert!(make_synthetic(ShapeKind::Sphere, 100, dent(1.5, 0.1), 0).is_err());
        assert!(make_synthetic(ShapeKind::Sphere, 100, dent(0.2, -0.1), 0).is_err());
    }

    #[test]
    fn zero_depth_labels_nothing() {
        let c = make_synthetic(ShapeKind::Sphere, 1000, dent(0.5, 0.0), 0).unwrap();
        assert_eq!(c.positive_count(), 0);
    }
}
