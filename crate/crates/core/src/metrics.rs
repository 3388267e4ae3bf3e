//! Registration metrics: inlier ratio, feature matching recall, RMSE,
//! registration recall, patch inlier ratio, rotation and translation error.
//!
//! Threshold comparisons are strict: `< tau1`, `> tau2`, `< tau3`, `> pir`.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{backproject_pixel, check_rotation, CameraIntrinsics, DepthMap, PointCloud, RigidTransform, Vec3};
use crate::matching::{Correspondence, PatchPair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricThresholds {
    /// Inlier distance in metres.
    pub tau1: f64,
    /// Inlier-ratio threshold for a scene to count towards FMR.
    pub tau2: f64,
    /// RMSE threshold in metres for registration recall.
    pub tau3: f64,
    /// Overlap ratio a patch pair must exceed to count as an inlier.
    pub pir: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        Self {
            tau1: 0.05,
            tau2: 0.1,
            tau3: 0.1,
            pir: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEvaluation {
    pub scene: String,
    pub inlier_ratio: f64,
    pub fmr_flag: bool,
    /// `None` when no pose was estimated.
    pub rmse_m: Option<f64>,
    pub rr_flag: bool,
    pub pir: Option<f64>,
    pub rre_deg: Option<f64>,
    pub rte_m: Option<f64>,
    pub correspondences: usize,
    pub thresholds: MetricThresholds,
}

/// Distance between the ground-truth-transformed point and the pixel lifted
/// with its depth.
pub fn correspondence_error(
    corr: &Correspondence,
    depth: &DepthMap,
    k: &CameraIntrinsics,
    cloud: &PointCloud,
    t_gt: &RigidTransform,
) -> Result<f64> {
    let d = depth.at(corr.u, corr.v).ok_or(Error::NonPositiveDepth(f64::NAN))?;
    let lifted = backproject_pixel(k, corr.u, corr.v, d)?;
    let p = cloud
        .points()
        .get(corr.point_index)
        .ok_or_else(|| Error::InvalidArgument(format!("point index {} out of range", corr.point_index)))?;
    Ok((t_gt.apply(p) - lifted).norm())
}

pub fn inlier_ratio(
    corrs: &[Correspondence],
    depth: &DepthMap,
    k: &CameraIntrinsics,
    cloud: &PointCloud,
    t_gt: &RigidTransform,
    tau1: f64,
) -> Result<f64> {
    if corrs.is_empty() {
        return Err(Error::EmptyCorrespondences);
    }
    let mut hits = 0usize;
    for c in corrs {
        if correspondence_error(c, depth, k, cloud, t_gt)? < tau1 {
            hits += 1;
        }
    }
    Ok(hits as f64 / corrs.len() as f64)
}

pub fn feature_matching_recall(irs: &[f64], tau2: f64) -> Result<f64> {
    fraction(irs, |ir| ir > tau2)
}

pub fn registration_rmse(cloud: &PointCloud, t_est: &RigidTransform, t_gt: &RigidTransform) -> Result<f64> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let sum: f64 = cloud
        .points()
        .iter()
        .map(|p| (t_est.apply(p) - t_gt.apply(p)).norm_squared())
        .sum();
    Ok((sum / cloud.len() as f64).sqrt())
}

pub fn registration_recall(rmses: &[f64], tau3: f64) -> Result<f64> {
    fraction(rmses, |r| r < tau3)
}

pub fn patch_inlier_ratio(pairs: &[PatchPair], threshold: f64) -> Result<f64> {
    let overlaps: Vec<f64> = pairs.iter().map(PatchPair::overlap).collect();
    fraction(&overlaps, |o| o > threshold)
}

fn fraction(values: &[f64], pred: impl Fn(f64) -> bool) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(values.iter().filter(|v| pred(**v)).count() as f64 / values.len() as f64)
}

/// Intrinsic X-Y-Z Euler angles `(a, b, c)` with `R = Rx(a) Ry(b) Rz(c)`, in
/// radians. At gimbal lock (`|b| = 90°`) the third angle is set to zero.
pub fn euler_xyz(r: &Matrix3<f64>) -> Vec3 {
    let s = r[(0, 2)].clamp(-1.0, 1.0);
    let b = s.asin();
    if s.abs() > 1.0 - 1e-12 {
        let a = r[(2, 1)].atan2(r[(1, 1)]);
        Vec3::new(a, b, 0.0)
    } else {
        let a = (-r[(1, 2)]).atan2(r[(2, 2)]);
        let c = (-r[(0, 1)]).atan2(r[(0, 0)]);
        Vec3::new(a, b, c)
    }
}

/// Sum of absolute intrinsic-XYZ Euler angles of `R_gtᵀ R_est`, in degrees.
pub fn relative_rotation_error(r_gt: &Matrix3<f64>, r_est: &Matrix3<f64>) -> Result<f64> {
    check_rotation(r_gt)?;
    check_rotation(r_est)?;
    let e = euler_xyz(&(r_gt.transpose() * r_est));
    Ok(e.iter().map(|a| a.abs()).sum::<f64>().to_degrees())
}

pub fn relative_translation_error(t_gt: &Vec3, t_est: &Vec3) -> f64 {
    (t_gt - t_est).norm()
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}
