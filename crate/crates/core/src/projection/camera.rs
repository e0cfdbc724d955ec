use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Focal length (pixels) at the reference 672-pixel rendering resolution.
pub const REFERENCE_FOCAL: f64 = 500.0;
pub const REFERENCE_RESOLUTION: usize = 672;
/// Camera distance for unit-norm clouds.
pub const DEFAULT_CAMERA_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.check()?;
        Ok(k)
    }

    pub fn check(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid camera intrinsics {self:?}")))
        }
    }

    /// Square image with the focal length scaled from the 672-pixel reference
    /// and the principal point at the image center.
    pub fn for_resolution(resolution: usize) -> Self {
        let f = REFERENCE_FOCAL * resolution as f64 / REFERENCE_RESOLUTION as f64;
        let c = resolution as f64 / 2.0;
        Self {
            fx: f,
            fy: f,
            cx: c,
            cy: c,
            width: resolution,
            height: resolution,
        }
    }
}

/// Rigid transform from cloud coordinates to camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "rotation is not proper orthonormal (|RᵀR−I|={ortho:.3e}, det={det})"
            )));
        }
        Ok(Self { rotation, translation })
    }

    /// Camera at `eye` with its optical (+z) axis through the origin. The image
    /// "up" direction follows the world axis least aligned with the optical axis.
    pub fn look_at_origin(eye: Vector3<f64>) -> Self {
        let forward = (-eye).normalize();
        let up = (0..3)
            .min_by(|&a, &b| forward[a].abs().total_cmp(&forward[b].abs()))
            .map(|k| {
                let mut e = Vector3::zeros();
                e[k] = 1.0;
                e
            })
            .unwrap();
        let x = forward.cross(&up).normalize();
        let y = forward.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self { rotation, translation }
    }

    /// Camera center in cloud coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// Fibonacci-sphere lattice of `n_views` cameras at distance `radius`, all
/// looking at the origin. The first camera sits on the +z pole.
pub fn generate_view_poses(n_views: usize, radius: f64) -> Vec<Pose> {
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..n_views)
        .map(|i| {
            let z = if n_views == 1 {
                1.0
            } else {
                1.0 - 2.0 * i as f64 / (n_views - 1) as f64
            };
            let r = (1.0 - z * z).max(0.0).sqrt();
            let theta = golden * i as f64;
            let dir = Vector3::new(r * theta.cos(), r * theta.sin(), z);
            Pose::look_at_origin(dir * radius)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

/// Pinhole projection. Returns the projection even for `z <= 0`; only points
/// on the camera plane are rejected.
pub fn project_point(p: &Vector3<f64>, pose: &Pose, k: &CameraIntrinsics) -> Result<Projection> {
    let pc = pose.rotation * p + pose.translation;
    let z = pc.z;
    if z.abs() < 1e-12 {
        return Err(Error::Domain("point on camera plane".into()));
    }
    Ok(Projection {
        u: k.fx * pc.x / z + k.cx,
        v: k.fy * pc.y / z + k.cy,
        z,
    })
}

/// Back-projects pixel coordinates at camera depth `z` into cloud coordinates.
pub fn inverse_map(u: f64, v: f64, z: f64, pose: &Pose, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(z > 0.0) {
        return Err(Error::Domain(format!("depth must be positive, got {z}")));
    }
    let ray = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    Ok(pose.rotation.transpose() * (ray * z - pose.translation))
}
