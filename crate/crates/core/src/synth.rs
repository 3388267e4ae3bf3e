//! Synthetic scenes and constructed features standing in for learned
//! backbones.
//!
//! A scene is a set of analytic primitives placed in front of camera A. The
//! point cloud is sampled on the primitive surfaces and expressed in a second
//! frame B; the ground-truth transform maps B into A. Depth is ray-cast from
//! the primitives, then every z-buffer winning point overwrites its pixel with
//! its own depth so ground-truth pairs are exactly depth-consistent.
//!
//! Features are built rather than learned: the two ends of a ground-truth
//! pair share one random unit vector, everything else gets an independent
//! one, and noise/outlier knobs degrade that ideal matcher.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Carrier, FeatureField};
use crate::geometry::{project_point, CameraIntrinsics, DepthMap, PointCloud, RigidTransform, Vec3};
use crate::matching::{label_fine_pairs, Correspondence, LabelThresholds, PairLabel};

/// Fraction of extra image keypoints (with no ground-truth partner) added by
/// [`synthesize_features`], relative to the number of ground-truth pairs.
pub const DISTRACTOR_RATIO: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Primitive {
    /// Rectangle spanned by two orthogonal unit axes.
    Rect {
        center: [f64; 3],
        axis_u: [f64; 3],
        axis_v: [f64; 3],
        half_u: f64,
        half_v: f64,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Cuboid rotated by an axis-angle vector (radians).
    Cuboid {
        center: [f64; 3],
        half_extents: [f64; 3],
        rotation: [f64; 3],
    },
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    center: Vec3,
    axis_u: Vec3,
    axis_v: Vec3,
    half_u: f64,
    half_v: f64,
}

#[derive(Debug, Clone, Copy)]
enum Surface {
    Rect(Rect),
    Sphere { center: Vec3, radius: f64 },
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

impl Primitive {
    fn surfaces(&self) -> Result<Vec<Surface>> {
        match *self {
            Primitive::Rect {
                center,
                axis_u,
                axis_v,
                half_u,
                half_v,
            } => {
                let (u, v) = (v3(axis_u), v3(axis_v));
                if (u.norm() - 1.0).abs() > 1e-9 || (v.norm() - 1.0).abs() > 1e-9 || u.dot(&v).abs() > 1e-9 {
                    return Err(Error::InvalidArgument("rect axes must be orthonormal".into()));
                }
                if !(half_u > 0.0 && half_v > 0.0) {
                    return Err(Error::InvalidArgument("rect extents must be positive".into()));
                }
                Ok(vec![Surface::Rect(Rect {
                    center: v3(center),
                    axis_u: u,
                    axis_v: v,
                    half_u,
                    half_v,
                })])
            }
            Primitive::Sphere { center, radius } => {
                if !(radius > 0.0) {
                    return Err(Error::InvalidArgument("sphere radius must be positive".into()));
                }
                Ok(vec![Surface::Sphere {
                    center: v3(center),
                    radius,
                }])
            }
            Primitive::Cuboid {
                center,
                half_extents,
                rotation,
            } => {
                if half_extents.iter().any(|h| !(*h > 0.0)) {
                    return Err(Error::InvalidArgument("cuboid extents must be positive".into()));
                }
                let r = nalgebra::Rotation3::new(v3(rotation)).into_inner();
                let c = v3(center);
                let axes = [r.column(0).into_owned(), r.column(1).into_owned(), r.column(2).into_owned()];
                let mut faces = Vec::with_capacity(6);
                for n in 0..3 {
                    let (a, b) = ((n + 1) % 3, (n + 2) % 3);
                    for sign in [-1.0, 1.0] {
                        faces.push(Surface::Rect(Rect {
                            center: c + axes[n] * (sign * half_extents[n]),
                            axis_u: axes[a],
                            axis_v: axes[b],
                            half_u: half_extents[a],
                            half_v: half_extents[b],
                        }));
                    }
                }
                Ok(faces)
            }
        }
    }
}

impl Surface {
    fn area(&self) -> f64 {
        match self {
            Surface::Rect(r) => 4.0 * r.half_u * r.half_v,
            Surface::Sphere { radius, .. } => 4.0 * PI * radius * radius,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        match self {
            Surface::Rect(r) => {
                let a: f64 = rng.random_range(-1.0..1.0);
                let b: f64 = rng.random_range(-1.0..1.0);
                r.center + r.axis_u * (a * r.half_u) + r.axis_v * (b * r.half_v)
            }
            Surface::Sphere { center, radius } => loop {
                let d = Vec3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                );
                let n = d.norm();
                if n > 1e-12 {
                    break center + d * (radius / n);
                }
            },
        }
    }

    /// Ray parameter of the first hit along `origin + t * dir`, `t > 0`.
    fn intersect(&self, dir: &Vec3) -> Option<f64> {
        match self {
            Surface::Rect(r) => {
                let normal = r.axis_u.cross(&r.axis_v);
                let denom = normal.dot(dir);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = normal.dot(&r.center) / denom;
                if t <= 0.0 {
                    return None;
                }
                let rel = dir * t - r.center;
                (rel.dot(&r.axis_u).abs() <= r.half_u && rel.dot(&r.axis_v).abs() <= r.half_v).then_some(t)
            }
            Surface::Sphere { center, radius } => {
                let a = dir.norm_squared();
                let b = -2.0 * dir.dot(center);
                let c = center.norm_squared() - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / (2.0 * a);
                let t1 = (-b + sq) / (2.0 * a);
                [t0, t1].into_iter().find(|t| *t > 0.0)
            }
        }
    }
}

/// Scene description: primitives in the camera-A frame plus sampling and
/// pose-range settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub point_count: usize,
    pub intrinsics: CameraIntrinsics,
    pub max_rotation_deg: f64,
    pub max_translation_m: f64,
}

impl Default for SceneSpec {
    /// A room corner with a back wall, a floor, a rotated box and a ball.
    fn default() -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        Self {
            primitives: vec![
                Primitive::Rect {
                    center: [0.0, 0.0, 3.0],
                    axis_u: [1.0, 0.0, 0.0],
                    axis_v: [0.0, 1.0, 0.0],
                    half_u: 2.0,
                    half_v: 1.5,
                },
                Primitive::Rect {
                    center: [0.0, 0.8, 2.0],
                    axis_u: [1.0, 0.0, 0.0],
                    axis_v: [0.0, 0.0, 1.0],
                    half_u: 2.0,
                    half_v: 1.0,
                },
                Primitive::Cuboid {
                    center: [-0.5, 0.4, 2.0],
                    half_extents: [0.3, 0.4, 0.3],
                    rotation: [0.0, 0.5, 0.0],
                },
                Primitive::Sphere {
                    center: [0.6, 0.25, 1.8],
                    radius: 0.35,
                },
                Primitive::Rect {
                    center: [1.3, -0.2, 2.4],
                    axis_u: [s, 0.0, s],
                    axis_v: [0.0, 1.0, 0.0],
                    half_u: 0.4,
                    half_v: 0.5,
                },
            ],
            point_count: 3000,
            intrinsics: CameraIntrinsics {
                fx: 150.0,
                fy: 150.0,
                cx: 80.0,
                cy: 60.0,
                width: 160,
                height: 120,
            },
            max_rotation_deg: 30.0,
            max_translation_m: 0.5,
        }
    }
}

/// A ground-truth pixel-point pair at the point's sub-pixel projection. At
/// most one pair per image pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtCorrespondence {
    pub u: f64,
    pub v: f64,
    pub point_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub cloud: PointCloud,
    pub depth: DepthMap,
    pub intrinsics: CameraIntrinsics,
    pub gt_transform: RigidTransform,
    pub gt_correspondences: Vec<GtCorrespondence>,
    pub seed: u64,
}

fn random_pose(rng: &mut ChaCha8Rng, max_rotation_deg: f64, max_translation_m: f64) -> RigidTransform {
    let axis = loop {
        let d = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        if d.norm() > 1e-9 {
            break d.normalize();
        }
    };
    let angle = rng.random_range(0.0..=1.0) * max_rotation_deg.to_radians();
    let t = Vec3::new(
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
    ) * max_translation_m;
    RigidTransform::from_axis_angle(axis * angle, t)
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Samples, renders and pairs a scene. Deterministic for a given seed.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    if spec.point_count < 100 {
        return Err(Error::InvalidArgument("point_count must be at least 100".into()));
    }
    if spec.primitives.is_empty() {
        return Err(Error::InvalidArgument("scene needs at least one primitive".into()));
    }
    if !(spec.max_rotation_deg >= 0.0 && spec.max_translation_m >= 0.0) {
        return Err(Error::InvalidArgument("pose ranges must be non-negative".into()));
    }
    let k = spec.intrinsics;
    k.validate()?;
    let mut surfaces = Vec::new();
    for p in &spec.primitives {
        surfaces.extend(p.surfaces()?);
    }
    let areas: Vec<f64> = surfaces.iter().map(Surface::area).collect();
    let total_area: f64 = areas.iter().sum();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points_a = Vec::with_capacity(spec.point_count);
    for _ in 0..spec.point_count {
        let mut pick = rng.random_range(0.0..total_area);
        let mut s = surfaces.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                s = i;
                break;
            }
            pick -= a;
        }
        points_a.push(surfaces[s].sample(&mut rng));
    }
    let gt = random_pose(&mut rng, spec.max_rotation_deg, spec.max_translation_m);
    let to_b = gt.inverse();
    let cloud = PointCloud::new(points_a.iter().map(|p| to_b.apply(p)).collect())?;

    let (w, h) = (k.width, k.height);
    let depth_values: Vec<f64> = (0..h)
        .flat_map(|v| (0..w).map(move |u| (u, v)))
        .map(|(u, v)| {
            let dir = Vec3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            surfaces
                .iter()
                .filter_map(|s| s.intersect(&dir))
                .fold(f64::NAN, f64::min)
        })
        .map(round_f32)
        .collect();
    let mut depth = DepthMap::new(w, h, depth_values)?;
    let ray_depth = depth.clone();

    // z-buffer: nearest point per pixel, ties to the lower index
    let mut winner: Vec<Option<(f64, usize, f64, f64)>> = vec![None; w * h];
    for (i, p) in cloud.points().iter().enumerate() {
        let cam = gt.apply(p);
        let Ok((u, v)) = project_point(&k, &cam) else { continue };
        let (ur, vr) = (u.round(), v.round());
        if ur < 0.0 || vr < 0.0 || ur >= w as f64 || vr >= h as f64 {
            continue;
        }
        let idx = vr as usize * w + ur as usize;
        if winner[idx].is_none_or(|(z, ..)| cam.z < z) {
            winner[idx] = Some((cam.z, i, u, v));
        }
    }
    let mut gt_correspondences = Vec::new();
    for (idx, win) in winner.iter().enumerate() {
        let Some((z, i, pu, pv)) = *win else { continue };
        let (u, v) = (idx % w, idx / w);
        // hidden behind the rendered surface
        if let Some(surface) = ray_depth.get(u, v) {
            if z > surface + 0.02 + 0.01 * surface {
                continue;
            }
        }
        depth.set(u, v, round_f32(z));
        gt_correspondences.push(GtCorrespondence {
            u: pu,
            v: pv,
            point_index: i,
        });
    }
    if gt_correspondences.is_empty() {
        return Err(Error::EmptyVisibleSet);
    }
    Ok(SyntheticScene {
        cloud,
        depth,
        intrinsics: k,
        gt_transform: gt,
        gt_correspondences,
        seed,
    })
}

/// Checks that every ground-truth pair projects into its pixel (within half
/// a pixel per axis), matches the stored depth within 1e-6 m and labels as
/// positive under `thresholds`.
pub fn check_scene_consistency(scene: &SyntheticScene, thresholds: &LabelThresholds) -> Result<()> {
    for g in &scene.gt_correspondences {
        let p = scene
            .cloud
            .points()
            .get(g.point_index)
            .ok_or_else(|| Error::InvalidArgument(format!("gt point {} out of range", g.point_index)))?;
        let cam = scene.gt_transform.apply(p);
        let (u, v) = project_point(&scene.intrinsics, &cam)?;
        if (u - g.u).abs() > 0.5 + 1e-9 || (v - g.v).abs() > 0.5 + 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "point {} projects to ({u}, {v}), recorded at ({}, {})",
                g.point_index, g.u, g.v
            )));
        }
        let d = scene
            .depth
            .at(g.u, g.v)
            .ok_or_else(|| Error::InvalidArgument(format!("no depth at ({}, {})", g.u, g.v)))?;
        if (d - cam.z).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "depth {d} disagrees with point depth {} at ({}, {})",
                cam.z, g.u, g.v
            )));
        }
        let corr = Correspondence::new(g.u, g.v, g.point_index, 1.0);
        let label = label_fine_pairs(&corr, d, &scene.intrinsics, &scene.cloud, &scene.gt_transform, thresholds)?;
        if label != PairLabel::Positive {
            return Err(Error::InvalidArgument(format!(
                "gt pair at ({}, {}) labelled {label:?}",
                g.u, g.v
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionConfig {
    pub gaussian_sigma_m: f64,
    pub mask_ratio: f64,
    pub feature_noise_sigma: f64,
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            gaussian_sigma_m: 0.0,
            mask_ratio: 0.0,
            feature_noise_sigma: 0.0,
            outlier_fraction: 0.0,
            seed: 0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma_m >= 0.0 && self.feature_noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise levels must be non-negative".into()));
        }
        if !((0.0..=1.0).contains(&self.mask_ratio) && (0.0..=1.0).contains(&self.outlier_fraction)) {
            return Err(Error::InvalidArgument("ratios must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Adds Gaussian noise to valid pixels, then invalidates a uniformly random
/// `mask_ratio` fraction of all pixels.
pub fn corrupt_depth(depth: &DepthMap, cfg: &CorruptionConfig) -> Result<DepthMap> {
    cfg.validate()?;
    let mut out = depth.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (depth.width(), depth.height());
    if cfg.gaussian_sigma_m > 0.0 {
        let noise = Normal::new(0.0, cfg.gaussian_sigma_m).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in 0..h {
            for u in 0..w {
                if let Some(d) = depth.get(u, v) {
                    out.set(u, v, d + noise.sample(&mut rng));
                }
            }
        }
    }
    let masked = (cfg.mask_ratio * (w * h) as f64).round() as usize;
    if masked > 0 {
        for i in sample(&mut rng, w * h, masked.min(w * h)) {
            out.invalidate(i % w, i / w);
        }
    }
    Ok(out)
}

/// Image and cloud descriptors for a scene. Image rows are the ground-truth
/// pixels in scene order followed by distractor pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFeatures {
    pub image: FeatureField,
    pub cloud: FeatureField,
    pub pixels: Vec<(f64, f64)>,
    /// Ground-truth cloud index per image row, `None` for distractors.
    pub pixel_partner: Vec<Option<usize>>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn stream_seed(scene_seed: u64, tag: u64, id: u64) -> u64 {
    splitmix(splitmix(splitmix(scene_seed) ^ tag) ^ id)
}

fn unit_vector(rng: &mut ChaCha8Rng, channels: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..channels).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

const TAG_PAIR: u64 = 1;
const TAG_CLOUD: u64 = 2;
const TAG_DISTRACTOR: u64 = 3;
const TAG_PIXEL_PICK: u64 = 4;

/// Builds ground-truth-aligned features with optional noise and outliers.
pub fn synthesize_features(scene: &SyntheticScene, channels: usize, noise: &CorruptionConfig) -> Result<SyntheticFeatures> {
    if channels < 4 {
        return Err(Error::InvalidArgument("need at least 4 channels".into()));
    }
    noise.validate()?;
    let n_points = scene.cloud.len();
    let mut cloud_rows: Vec<Option<Vec<f64>>> = vec![None; n_points];
    let mut image_rows = Vec::new();
    let mut pixels = Vec::new();
    let mut partner = Vec::new();
    for (pair_id, g) in scene.gt_correspondences.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(scene.seed, TAG_PAIR, pair_id as u64));
        let base = unit_vector(&mut rng, channels);
        cloud_rows[g.point_index] = Some(base.clone());
        image_rows.push(base);
        pixels.push((g.u, g.v));
        partner.push(Some(g.point_index));
    }
    let mut cloud_rows: Vec<Vec<f64>> = cloud_rows
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            row.unwrap_or_else(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(scene.seed, TAG_CLOUD, i as u64));
                unit_vector(&mut rng, channels)
            })
        })
        .collect();

    // distractors: valid-depth pixels that carry no ground-truth point
    let (w, h) = (scene.depth.width(), scene.depth.height());
    let mut taken = vec![false; w * h];
    for g in &scene.gt_correspondences {
        taken[g.v.round() as usize * w + g.u.round() as usize] = true;
    }
    let free: Vec<usize> = (0..w * h)
        .filter(|&i| !taken[i] && scene.depth.valid_mask()[i])
        .collect();
    let wanted = ((scene.gt_correspondences.len() as f64 * DISTRACTOR_RATIO).round() as usize).min(free.len());
    let mut pick_rng = ChaCha8Rng::seed_from_u64(stream_seed(scene.seed, TAG_PIXEL_PICK, 0));
    let mut picks: Vec<usize> = sample(&mut pick_rng, free.len(), wanted).into_iter().map(|i| free[i]).collect();
    picks.sort_unstable();
    for (d, idx) in picks.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(scene.seed, TAG_DISTRACTOR, d as u64));
        image_rows.push(unit_vector(&mut rng, channels));
        pixels.push(((idx % w) as f64, (idx / w) as f64));
        partner.push(None);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut perturb = |rows: &mut [Vec<f64>]| -> Result<()> {
        if noise.feature_noise_sigma == 0.0 {
            return Ok(());
        }
        let dist = Normal::new(0.0, noise.feature_noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for row in rows.iter_mut() {
            for x in row.iter_mut() {
                *x += dist.sample(&mut rng);
            }
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        Ok(())
    };
    perturb(&mut image_rows)?;
    perturb(&mut cloud_rows)?;
    let outliers = (noise.outlier_fraction * image_rows.len() as f64).round() as usize;
    if outliers > 0 {
        let n = image_rows.len();
        for i in sample(&mut rng, n, outliers.min(n)) {
            image_rows[i] = unit_vector(&mut rng, channels);
        }
    }
    let to_matrix = |rows: &[Vec<f64>]| DMatrix::from_row_iterator(rows.len(), channels, rows.iter().flatten().copied());
    Ok(SyntheticFeatures {
        image: FeatureField::new(to_matrix(&image_rows), Carrier::Image)?,
        cloud: FeatureField::new(to_matrix(&cloud_rows), Carrier::Cloud)?,
        pixels,
        pixel_partner: partner,
    })
}
