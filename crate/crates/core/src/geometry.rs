//! Basic geometric types: rigid transforms, pinhole camera, point clouds,
//! depth maps and normal fields.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const ORTHO_TOL: f64 = 1e-9;

/// A rotation in SO(3) followed by a translation: `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl RigidTransform {
    /// Builds a transform, rejecting rotations that are not orthonormal with
    /// determinant +1 (within 1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation).map_err(|e| match e {
            Error::InvalidRotation(msg) => Error::InvalidTransform(msg),
            other => other,
        })?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Rotation given as an axis-angle vector (radians).
    pub fn from_axis_angle(axis_angle: Vec3, translation: Vec3) -> Self {
        Self {
            rotation: Rotation3::new(axis_angle).into_inner(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Row-major rotation entries.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    pub fn from_row_major(rotation: [f64; 9], translation: [f64; 3]) -> Result<Self> {
        Self::new(
            Matrix3::from_row_slice(&rotation),
            Vec3::new(translation[0], translation[1], translation[2]),
        )
    }
}

/// Checks orthonormality and a positive unit determinant within 1e-9.
pub fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidRotation("non-finite entries".into()));
    }
    let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
    if dev > ORTHO_TOL {
        return Err(Error::InvalidRotation(format!(
            "RᵀR deviates from identity by {dev:e}"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ORTHO_TOL {
        return Err(Error::InvalidRotation(format!("determinant {det}")));
    }
    Ok(())
}

/// Projects an arbitrary 3×3 matrix onto the closest rotation (Frobenius norm).
pub fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

pub fn apply_transform(t: &RigidTransform, p: &Vec3) -> Vec3 {
    t.apply(p)
}

/// Pinhole intrinsics with image size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "cx {} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "cy {} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// True when the (real-valued) pixel lies inside the image rectangle.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Projects a camera-frame point to pixel coordinates.
pub fn project_point(k: &CameraIntrinsics, p: &Vec3) -> Result<(f64, f64)> {
    if !(p.z > 0.0) {
        return Err(Error::NonPositiveDepth(p.z));
    }
    Ok((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// Lifts a pixel with known depth to a camera-frame point.
pub fn backproject_pixel(k: &CameraIntrinsics, u: f64, v: f64, depth: f64) -> Result<Vec3> {
    if !(depth > 0.0) {
        return Err(Error::NonPositiveDepth(depth));
    }
    Ok(Vec3::new(
        (u - k.cx) * depth / k.fx,
        (v - k.cy) * depth / k.fy,
        depth,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::InvalidArgument(format!("point {i} is not finite")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
        }
    }
}

/// Row-major depth image; `values[v * width + u]` is the depth at column `u`, row `v`.
/// Equality ignores the stored value of invalid pixels.
#[derive(Debug, Clone)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Builds a depth map. Entries that are NaN, infinite or non-positive are
    /// marked invalid.
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                got: values.len(),
            });
        }
        let valid = values.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                values.push(f(u, v));
            }
        }
        Self::new(width, height, values).expect("sized by construction")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    /// Depth at an integer pixel when valid.
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        if u >= self.width || v >= self.height {
            return None;
        }
        let i = self.index(u, v);
        self.valid[i].then(|| self.values[i])
    }

    /// Depth at the pixel containing real coordinates `(u, v)` (nearest pixel centre).
    pub fn at(&self, u: f64, v: f64) -> Option<f64> {
        let (ui, vi) = (u.round(), v.round());
        if ui < 0.0 || vi < 0.0 {
            return None;
        }
        self.get(ui as usize, vi as usize)
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        u < self.width && v < self.height && self.valid[self.index(u, v)]
    }

    pub fn invalidate(&mut self, u: usize, v: usize) {
        let i = self.index(u, v);
        self.valid[i] = false;
        self.values[i] = f64::NAN;
    }

    pub fn set(&mut self, u: usize, v: usize, depth: f64) {
        let i = self.index(u, v);
        self.values[i] = depth;
        self.valid[i] = depth.is_finite() && depth > 0.0;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

impl PartialEq for DepthMap {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.valid == other.valid
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(&self.valid)
                .all(|((a, b), ok)| !ok || a == b)
    }
}

/// Per-point or per-pixel unit normals. Point fields use shape `(count, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalField {
    width: usize,
    height: usize,
    normals: Vec<Vec3>,
    valid: Vec<bool>,
}

impl NormalField {
    pub fn new(width: usize, height: usize, normals: Vec<Vec3>, valid: Vec<bool>) -> Result<Self> {
        if normals.len() != width * height || valid.len() != normals.len() {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                got: normals.len().min(valid.len()),
            });
        }
        for (i, (n, ok)) in normals.iter().zip(&valid).enumerate() {
            if *ok && (n.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::NotNormalized {
                    row: i,
                    norm: n.norm(),
                });
            }
        }
        Ok(Self {
            width,
            height,
            normals,
            valid,
        })
    }

    /// Per-point field with every entry valid.
    pub fn from_points(normals: Vec<Vec3>) -> Result<Self> {
        let n = normals.len();
        Self::new(n, 1, normals, vec![true; n])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, i: usize) -> Option<&Vec3> {
        self.valid.get(i).copied().unwrap_or(false).then(|| &self.normals[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}
