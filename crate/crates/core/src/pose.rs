//! Camera pose from 2D-3D correspondences: normalised DLT, Procrustes
//! projection onto SO(3), Gauss-Newton refinement of pixel reprojection
//! error, and a seeded RANSAC wrapper.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix4, Matrix6, Rotation3, SymmetricEigen, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{check_rotation, project_to_so3, CameraIntrinsics, RigidTransform, Vec3};

/// Minimum number of correspondences for the linear solver.
pub const DLT_MIN_POINTS: usize = 6;

const GN_MAX_ITERS: usize = 50;
const GN_STEP_TOL: f64 = 1e-10;
const MAX_HALVINGS: usize = 30;
const DEGENERACY_GAP: f64 = 1e-9;

/// A pixel observation of a known 3D point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointObservation {
    pub u: f64,
    pub v: f64,
    pub point: Vec3,
}

impl PointObservation {
    pub fn new(u: f64, v: f64, point: Vec3) -> Self {
        Self { u, v, point }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub inlier_threshold_px: f64,
    pub min_sample: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            inlier_threshold_px: 8.0,
            min_sample: DLT_MIN_POINTS,
            confidence: 0.999,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be at least 1".into()));
        }
        if !(self.inlier_threshold_px > 0.0) {
            return Err(Error::InvalidArgument("inlier threshold must be positive".into()));
        }
        if self.min_sample < DLT_MIN_POINTS {
            return Err(Error::InvalidArgument(format!(
                "min_sample must be at least {DLT_MIN_POINTS} for the linear solver"
            )));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::InvalidArgument("confidence must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub transform: RigidTransform,
    pub inlier_mask: Vec<bool>,
    pub mean_reprojection_error: f64,
}

impl PoseEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|m| **m).count()
    }
}

/// Pixel residual of one observation; `None` when the point is not in front
/// of the camera.
pub fn reprojection_residual(t: &RigidTransform, k: &CameraIntrinsics, obs: &PointObservation) -> Option<(f64, f64)> {
    let p = t.apply(&obs.point);
    if !(p.z > 0.0) {
        return None;
    }
    Some((k.fx * p.x / p.z + k.cx - obs.u, k.fy * p.y / p.z + k.cy - obs.v))
}

/// Euclidean reprojection error in pixels (infinite behind the camera).
pub fn reprojection_error(t: &RigidTransform, k: &CameraIntrinsics, obs: &PointObservation) -> f64 {
    reprojection_residual(t, k, obs).map_or(f64::INFINITY, |(du, dv)| (du * du + dv * dv).sqrt())
}

fn total_squared_error(t: &RigidTransform, k: &CameraIntrinsics, obs: &[PointObservation]) -> f64 {
    obs.iter()
        .map(|o| match reprojection_residual(t, k, o) {
            Some((du, dv)) => du * du + dv * dv,
            None => f64::INFINITY,
        })
        .sum()
}

/// Similarity that centres points and scales their mean distance to `target`.
fn normalizing_scale(centroid_dists: impl Iterator<Item = f64>, count: usize, target: f64) -> f64 {
    let mean = centroid_dists.sum::<f64>() / count as f64;
    if mean > 0.0 {
        target / mean
    } else {
        1.0
    }
}

/// Linear pose estimate from at least six non-coplanar observations.
pub fn dlt_pose(obs: &[PointObservation], k: &CameraIntrinsics) -> Result<RigidTransform> {
    if obs.len() < DLT_MIN_POINTS {
        return Err(Error::InsufficientPoints {
            needed: DLT_MIN_POINTS,
            got: obs.len(),
        });
    }
    let n = obs.len();
    let rays: Vec<(f64, f64)> = obs
        .iter()
        .map(|o| ((o.u - k.cx) / k.fx, (o.v - k.cy) / k.fy))
        .collect();

    let c2 = rays.iter().fold((0.0, 0.0), |a, r| (a.0 + r.0, a.1 + r.1));
    let c2 = (c2.0 / n as f64, c2.1 / n as f64);
    let s2 = normalizing_scale(
        rays.iter().map(|r| ((r.0 - c2.0).powi(2) + (r.1 - c2.1).powi(2)).sqrt()),
        n,
        std::f64::consts::SQRT_2,
    );
    let c3 = obs.iter().fold(Vec3::zeros(), |a, o| a + o.point) / n as f64;
    let s3 = normalizing_scale(obs.iter().map(|o| (o.point - c3).norm()), n, 3f64.sqrt());

    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (o, r)) in obs.iter().zip(&rays).enumerate() {
        let p = (o.point - c3) * s3;
        let x = [p.x, p.y, p.z, 1.0];
        let xn = (r.0 - c2.0) * s2;
        let yn = (r.1 - c2.1) * s2;
        for j in 0..4 {
            a[(2 * i, j)] = x[j];
            a[(2 * i, 8 + j)] = -xn * x[j];
            a[(2 * i + 1, 4 + j)] = x[j];
            a[(2 * i + 1, 8 + j)] = -yn * x[j];
        }
    }
    // the null vector of A is the smallest eigenvector of AᵀA
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::DegenerateConfiguration("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));
    let sv = |i: usize| svd.singular_values[order[i]];
    if order.len() < 12 {
        return Err(Error::DegenerateConfiguration("rank-deficient system".into()));
    }
    if sv(10) - sv(11) <= DEGENERACY_GAP * sv(0) {
        return Err(Error::DegenerateConfiguration(format!(
            "null space is not one-dimensional (σ11 = {:e}, σ12 = {:e})",
            sv(10),
            sv(11)
        )));
    }
    let null = v_t.row(order[11]);
    let p_norm = Matrix3x4::from_row_slice(null.transpose().as_slice());

    let t2 = Matrix3::new(s2, 0.0, -s2 * c2.0, 0.0, s2, -s2 * c2.1, 0.0, 0.0, 1.0);
    let mut t3 = Matrix4::identity() * s3;
    t3[(3, 3)] = 1.0;
    t3[(0, 3)] = -s3 * c3.x;
    t3[(1, 3)] = -s3 * c3.y;
    t3[(2, 3)] = -s3 * c3.z;
    let t2_inv = t2
        .try_inverse()
        .ok_or_else(|| Error::DegenerateConfiguration("singular image normalisation".into()))?;
    let mut p = t2_inv * p_norm * t3;

    let mut m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    if m.determinant() < 0.0 {
        p = -p;
        m = -m;
    }
    let sing = m.svd(false, false).singular_values;
    let scale = sing.sum() / 3.0;
    if !(scale > 0.0) {
        return Err(Error::DegenerateConfiguration("zero projection scale".into()));
    }
    let rotation = project_to_so3(&m);
    let translation = p.column(3).into_owned() / scale;
    RigidTransform::new(rotation, translation)
}

/// Gauss-Newton refinement of total squared pixel error, with rotation
/// updates applied as left-multiplied axis-angle increments. A step that
/// raises the cost is halved until it does not.
pub fn refine_pose(initial: &RigidTransform, obs: &[PointObservation], k: &CameraIntrinsics) -> RigidTransform {
    let mut pose = *initial;
    let mut cost = total_squared_error(&pose, k, obs);
    for _ in 0..GN_MAX_ITERS {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for o in obs {
            let rp = pose.rotation() * o.point;
            let p = rp + pose.translation();
            if !(p.z > 0.0) {
                continue;
            }
            let iz = 1.0 / p.z;
            let ru = k.fx * p.x * iz + k.cx - o.u;
            let rv = k.fy * p.y * iz + k.cy - o.v;
            let du = [k.fx * iz, 0.0, -k.fx * p.x * iz * iz];
            let dv = [0.0, k.fy * iz, -k.fy * p.y * iz * iz];
            // d p / d omega = -[rp]x, d p / d t = I
            let skew = [
                [0.0, rp.z, -rp.y],
                [-rp.z, 0.0, rp.x],
                [rp.y, -rp.x, 0.0],
            ];
            let mut ju = Vector6::zeros();
            let mut jv = Vector6::zeros();
            for c in 0..3 {
                ju[c] = (0..3).map(|r| du[r] * skew[r][c]).sum();
                jv[c] = (0..3).map(|r| dv[r] * skew[r][c]).sum();
                ju[3 + c] = du[c];
                jv[3 + c] = dv[c];
            }
            jtj += ju * ju.transpose() + jv * jv.transpose();
            jtr += ju * ru + jv * rv;
        }
        let Some(chol) = jtj.cholesky() else { break };
        let step = -chol.solve(&jtr);
        if !step.iter().all(|s| s.is_finite()) {
            break;
        }
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let s = step * scale;
            let candidate = apply_increment(&pose, &s);
            let c = total_squared_error(&candidate, k, obs);
            if c <= cost {
                pose = candidate;
                cost = c;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted || (step * scale).norm() < GN_STEP_TOL {
            break;
        }
    }
    pose
}

fn apply_increment(pose: &RigidTransform, step: &Vector6<f64>) -> RigidTransform {
    let omega = Vec3::new(step[0], step[1], step[2]);
    let delta_t = Vec3::new(step[3], step[4], step[5]);
    let r = Rotation3::new(omega).into_inner() * pose.rotation();
    let r = if check_rotation(&r).is_ok() {
        r
    } else {
        project_to_so3(&r)
    };
    RigidTransform::new(r, pose.translation() + delta_t).unwrap_or(*pose)
}

/// Ratio of the smallest to the largest principal spread below which a point
/// set is also initialised with the planar solver.
pub const PLANARITY_RATIO: f64 = 0.1;

/// Square root of the smallest over the largest eigenvalue of the point
/// covariance, together with its ascending eigenpairs.
fn principal_axes(points: &[Vec3]) -> (Vec3, [f64; 3], Matrix3<f64>) {
    let n = points.len() as f64;
    let c = points.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        cov += (p - c) * (p - c).transpose();
    }
    let eig = SymmetricEigen::new(cov / n);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.map(|i| eig.eigenvalues[i]);
    let axes = Matrix3::from_columns(&order.map(|i| eig.eigenvectors.column(i).into_owned()));
    (c, values, axes)
}

/// Linear pose from at least four observations of (nearly) coplanar points,
/// through the plane-to-image homography.
pub fn planar_pose(obs: &[PointObservation], k: &CameraIntrinsics) -> Result<RigidTransform> {
    if obs.len() < 4 {
        return Err(Error::InsufficientPoints {
            needed: 4,
            got: obs.len(),
        });
    }
    let n = obs.len();
    let pts: Vec<Vec3> = obs.iter().map(|o| o.point).collect();
    let (c3, spread, axes) = principal_axes(&pts);
    if spread[1].max(0.0).sqrt() <= 1e-6 * spread[2].max(0.0).sqrt() {
        return Err(Error::DegenerateConfiguration("points are collinear".into()));
    }
    let e1 = axes.column(2).into_owned();
    let e2 = axes.column(1).into_owned();
    let e3 = e1.cross(&e2);
    let plane: Vec<(f64, f64)> = pts.iter().map(|p| ((p - c3).dot(&e1), (p - c3).dot(&e2))).collect();
    let rays: Vec<(f64, f64)> = obs
        .iter()
        .map(|o| ((o.u - k.cx) / k.fx, (o.v - k.cy) / k.fy))
        .collect();

    let centre = |xs: &[(f64, f64)]| {
        let c = xs.iter().fold((0.0, 0.0), |a, r| (a.0 + r.0, a.1 + r.1));
        let c = (c.0 / n as f64, c.1 / n as f64);
        let s = normalizing_scale(
            xs.iter().map(|r| ((r.0 - c.0).powi(2) + (r.1 - c.1).powi(2)).sqrt()),
            n,
            std::f64::consts::SQRT_2,
        );
        (c, s)
    };
    let (cp, sp) = centre(&plane);
    let (cr, sr) = centre(&rays);
    let mut a = DMatrix::<f64>::zeros(2 * n, 9);
    for (i, (x, r)) in plane.iter().zip(&rays).enumerate() {
        let x = [(x.0 - cp.0) * sp, (x.1 - cp.1) * sp, 1.0];
        let xn = (r.0 - cr.0) * sr;
        let yn = (r.1 - cr.1) * sr;
        for j in 0..3 {
            a[(2 * i, j)] = x[j];
            a[(2 * i, 6 + j)] = -xn * x[j];
            a[(2 * i + 1, 3 + j)] = x[j];
            a[(2 * i + 1, 6 + j)] = -yn * x[j];
        }
    }
    let ata = a.transpose() * &a;
    let eig = SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let sv = |i: usize| eig.eigenvalues[order[i]].max(0.0).sqrt();
    if sv(1) - sv(0) <= DEGENERACY_GAP * sv(8) {
        return Err(Error::DegenerateConfiguration("homography null space is not one-dimensional".into()));
    }
    let h = eig.eigenvectors.column(order[0]);
    let h_norm = Matrix3::from_row_slice(h.as_slice());
    let tp = Matrix3::new(sp, 0.0, -sp * cp.0, 0.0, sp, -sp * cp.1, 0.0, 0.0, 1.0);
    let tr = Matrix3::new(sr, 0.0, -sr * cr.0, 0.0, sr, -sr * cr.1, 0.0, 0.0, 1.0);
    let tr_inv = tr
        .try_inverse()
        .ok_or_else(|| Error::DegenerateConfiguration("singular image normalisation".into()))?;
    let mut hm = tr_inv * h_norm * tp;
    let lambda = 0.5 * (hm.column(0).norm() + hm.column(1).norm());
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::DegenerateConfiguration("degenerate homography".into()));
    }
    // the plane centroid must lie in front of the camera
    if hm[(2, 2)] < 0.0 {
        hm = -hm;
    }
    hm /= lambda;
    let r1 = hm.column(0).into_owned();
    let r2 = hm.column(1).into_owned();
    let in_plane = Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]);
    let basis = Matrix3::from_columns(&[e1, e2, e3]);
    let rotation = project_to_so3(&(project_to_so3(&in_plane) * basis.transpose()));
    let translation = hm.column(2).into_owned() - rotation * c3;
    RigidTransform::new(rotation, translation)
}

/// Linear initialisation followed by Gauss-Newton refinement. Thin point sets
/// are also initialised from the planar homography and the lower-cost
/// refinement wins.
pub fn pnp_solve(obs: &[PointObservation], k: &CameraIntrinsics) -> Result<RigidTransform> {
    if obs.len() < DLT_MIN_POINTS {
        return Err(Error::InsufficientPoints {
            needed: DLT_MIN_POINTS,
            got: obs.len(),
        });
    }
    let pts: Vec<Vec3> = obs.iter().map(|o| o.point).collect();
    let (_, spread, _) = principal_axes(&pts);
    let thin = spread[0].max(0.0).sqrt() <= PLANARITY_RATIO * spread[2].max(0.0).sqrt();
    let general = dlt_pose(obs, k).map(|init| refine_pose(&init, obs, k));
    if !thin {
        return general;
    }
    let planar = planar_pose(obs, k).map(|init| refine_pose(&init, obs, k));
    match (general, planar) {
        (Ok(g), Ok(p)) => Ok(if total_squared_error(&p, k, obs) < total_squared_error(&g, k, obs) { p } else { g }),
        (Ok(g), Err(_)) => Ok(g),
        (Err(_), Ok(p)) => Ok(p),
        (Err(e), Err(_)) => Err(e),
    }
}

fn inlier_mask(t: &RigidTransform, k: &CameraIntrinsics, obs: &[PointObservation], threshold: f64) -> Vec<bool> {
    obs.iter()
        .map(|o| reprojection_error(t, k, o) < threshold)
        .collect()
}

fn required_iterations(inlier_fraction: f64, sample: usize, confidence: f64, cap: usize) -> usize {
    let w = inlier_fraction.powi(sample as i32);
    if w <= 0.0 {
        return cap;
    }
    if w >= 1.0 {
        return 1;
    }
    let n = (1.0 - confidence).ln() / (1.0 - w).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// Hypothesise-and-verify pose estimation. Samples are drawn sequentially
/// from `cfg.seed`; ties between hypotheses keep the earliest.
pub fn pnp_ransac(obs: &[PointObservation], k: &CameraIntrinsics, cfg: &RansacConfig) -> Result<PoseEstimate> {
    cfg.validate()?;
    if obs.len() < cfg.min_sample {
        return Err(Error::InsufficientPoints {
            needed: cfg.min_sample,
            got: obs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, RigidTransform)> = None;
    let mut budget = cfg.max_iterations;
    let mut iteration = 0;
    let mut subset = Vec::with_capacity(cfg.min_sample);
    while iteration < budget {
        iteration += 1;
        let idx = sample(&mut rng, obs.len(), cfg.min_sample);
        subset.clear();
        subset.extend(idx.iter().map(|i| obs[i]));
        let Ok(hyp) = pnp_solve(&subset, k) else { continue };
        // a hypothesis must explain its own sample
        if subset
            .iter()
            .any(|o| reprojection_error(&hyp, k, o) >= cfg.inlier_threshold_px)
        {
            continue;
        }
        let count = inlier_mask(&hyp, k, obs, cfg.inlier_threshold_px)
            .iter()
            .filter(|m| **m)
            .count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, hyp));
            let frac = count as f64 / obs.len() as f64;
            budget = required_iterations(frac, cfg.min_sample, cfg.confidence, cfg.max_iterations);
        }
    }
    let Some((count, mut pose)) = best else {
        return Err(Error::NoConsensus { inliers: 0 });
    };
    if count < DLT_MIN_POINTS {
        return Err(Error::NoConsensus { inliers: count });
    }
    let mut mask = inlier_mask(&pose, k, obs, cfg.inlier_threshold_px);
    // refit on the consensus set until it stops changing
    for _ in 0..5 {
        let inliers: Vec<PointObservation> = obs
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(o, _)| *o)
            .collect();
        if inliers.len() < DLT_MIN_POINTS {
            break;
        }
        let Ok(refit) = pnp_solve(&inliers, k) else {
            break;
        };
        let new_mask = inlier_mask(&refit, k, obs, cfg.inlier_threshold_px);
        let new_count = new_mask.iter().filter(|m| **m).count();
        if new_count < mask.iter().filter(|m| **m).count() {
            break;
        }
        pose = refit;
        let stable = new_mask == mask;
        mask = new_mask;
        if stable {
            break;
        }
    }
    let inliers = mask.iter().filter(|m| **m).count();
    if inliers < DLT_MIN_POINTS {
        return Err(Error::NoConsensus { inliers });
    }
    let mean_reprojection_error = obs
        .iter()
        .zip(&mask)
        .filter(|(_, m)| **m)
        .map(|(o, _)| reprojection_error(&pose, k, o))
        .sum::<f64>()
        / inliers as f64;
    Ok(PoseEstimate {
        transform: pose,
        inlier_mask: mask,
        mean_reprojection_error,
    })
}
