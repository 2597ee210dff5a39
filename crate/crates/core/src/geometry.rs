//! Projective geometry for a rig of pinhole cameras.
//!
//! Conventions used across the workspace:
//! * ego frame: x forward, y left, z up;
//! * camera frame: x right, y down, z forward;
//! * extrinsics map ego coordinates into the camera frame, `p_cam = R * p_ego + t`.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default near-plane cutoff in meters.
pub const Z_NEAR: f64 = 0.1;

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("invalid extrinsics: {0}")]
    Extrinsics(String),
    #[error("invalid camera rig: {0}")]
    Rig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::Intrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::Intrinsics(format!(
                "cx={} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::Intrinsics(format!(
                "cy={} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics of the same camera sampled on a grid `stride` times coarser.
    pub fn downsampled(&self, stride: usize) -> Intrinsics {
        let s = stride as f64;
        Intrinsics {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            width: self.width / stride,
            height: self.height / stride,
        }
    }
}

/// Rigid ego-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Extrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let e = Self { rotation, translation };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max();
        if err > ORTHO_TOL {
            return Err(GeometryError::Extrinsics(format!(
                "rotation not orthonormal (max deviation {err:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(GeometryError::Extrinsics(format!("rotation determinant {det} != +1")));
        }
        Ok(())
    }

    /// Camera looking along ego heading `yaw`, tilted down by `pitch`, with its
    /// optical center at `center` (ego frame).
    pub fn looking(yaw: f64, pitch: f64, center: Vector3<f64>) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let forward = Vector3::new(cy * cp, sy * cp, -sp);
        let right = Vector3::new(sy, -cy, 0.0);
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * center);
        Self { rotation, translation }
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera optical center in the ego frame.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self, GeometryError> {
        let rig = Self { cameras };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let first = self
            .cameras
            .first()
            .ok_or_else(|| GeometryError::Rig("rig needs at least one camera".into()))?;
        for (i, cam) in self.cameras.iter().enumerate() {
            cam.intrinsics.validate()?;
            cam.extrinsics.validate()?;
            if (cam.intrinsics.width, cam.intrinsics.height) != (first.intrinsics.width, first.intrinsics.height) {
                return Err(GeometryError::Rig(format!(
                    "camera {i} image size differs from camera 0"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// `(height, width)` shared by all views.
    pub fn image_size(&self) -> (usize, usize) {
        let k = &self.cameras[0].intrinsics;
        (k.height, k.width)
    }
}

/// A projected point: pixel coordinates, camera-frame depth, and whether it
/// lands inside the image in front of the near plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

pub fn project_point(p: &Vector3<f64>, cam: &Camera, z_near: f64) -> Projection {
    let k = &cam.intrinsics;
    let pc = cam.extrinsics.to_camera(p);
    let depth = pc.z;
    let u = k.cx + k.fx * pc.x / depth;
    let v = k.cy + k.fy * pc.y / depth;
    let valid = depth > z_near && u >= 0.0 && u < k.width as f64 && v >= 0.0 && v < k.height as f64;
    Projection { u, v, depth, valid }
}

pub fn project_points(points: &[Vector3<f64>], cam: &Camera, z_near: f64) -> Vec<Projection> {
    points.iter().map(|p| project_point(p, cam, z_near)).collect()
}

/// Viewing ray of pixel `(u, v)` in the ego frame as `(origin, direction)`.
/// The direction is scaled so that its camera-frame z component is 1, hence
/// the ray parameter equals camera depth.
pub fn pixel_ray(u: f64, v: f64, cam: &Camera) -> (Vector3<f64>, Vector3<f64>) {
    let k = &cam.intrinsics;
    let dir_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    let rt = cam.extrinsics.rotation.transpose();
    (cam.extrinsics.center(), rt * dir_cam)
}

/// Intersects the viewing ray of pixel `(u, v)` with the plane
/// `z = ground_height`. Returns `None` when the ray is parallel to the plane or
/// meets it behind the camera.
pub fn backproject_ground(u: f64, v: f64, cam: &Camera, ground_height: f64) -> Option<Vector3<f64>> {
    let (origin, dir) = pixel_ray(u, v, cam);
    if dir.z.abs() < 1e-12 {
        return None;
    }
    let depth = (ground_height - origin.z) / dir.z;
    if depth <= 0.0 {
        return None;
    }
    let mut p = origin + dir * depth;
    p.z = ground_height;
    Some(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    /// Row-major depth in meters; meaningful only where `valid` is set.
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthImage {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.width + col;
        self.valid[i].then_some(self.depth[i])
    }
}

/// Z-buffer rasterization of a point cloud: every pixel keeps the minimum depth
/// of the points whose projection floors onto it.
pub fn render_depth(points: &[Vector3<f64>], cam: &Camera, z_near: f64) -> DepthImage {
    let k = &cam.intrinsics;
    let mut img = DepthImage::empty(k.width, k.height);
    for p in points {
        let pr = project_point(p, cam, z_near);
        if !pr.valid {
            continue;
        }
        let col = pr.u.floor() as usize;
        let row = pr.v.floor() as usize;
        let i = row * k.width + col;
        if !img.valid[i] || pr.depth < img.depth[i] {
            img.depth[i] = pr.depth;
            img.valid[i] = true;
        }
    }
    img
}

/// Adds random rigid noise to every camera's extrinsics.
///
/// Each rotation is left-composed with a rotation about a uniformly random
/// axis by an angle drawn from `N(0, sigma_rot)`; each translation receives an
/// isotropic `N(0, sigma_trans)` offset. Zero sigmas return the rig unchanged.
pub fn perturb_extrinsics(rig: &CameraRig, sigma_rot: f64, sigma_trans: f64, seed: u64) -> CameraRig {
    assert!(
        sigma_rot >= 0.0 && sigma_trans >= 0.0,
        "noise sigmas must be non-negative"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = rig.clone();
    for cam in &mut out.cameras {
        // Draw unconditionally so each axis sees the same stream regardless of the other sigma.
        let axis: [f64; 3] = UnitSphere.sample(&mut rng);
        let z_angle: f64 = rng.sample(StandardNormal);
        let z_trans: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        if sigma_rot > 0.0 {
            let axis = Unit::new_normalize(Vector3::from(axis));
            let noise = Rotation3::from_axis_angle(&axis, sigma_rot * z_angle);
            cam.extrinsics.rotation = noise.matrix() * cam.extrinsics.rotation;
        }
        if sigma_trans > 0.0 {
            cam.extrinsics.translation += Vector3::from(z_trans) * sigma_trans;
        }
    }
    out
}
