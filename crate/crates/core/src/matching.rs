//! Cross-modal matching: cosine score maps, mutual top-k patch selection,
//! mutual-argmax point matching and ground-truth labelling of pairs.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureField;
use crate::geometry::{backproject_pixel, project_point, CameraIntrinsics, DepthMap, PointCloud, RigidTransform, Vec3};

/// Cosine similarities, image rows by cloud columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub scores: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub u: f64,
    pub v: f64,
    pub point_index: usize,
    pub score: f64,
}

impl Correspondence {
    pub fn new(u: f64, v: f64, point_index: usize, score: f64) -> Self {
        Self {
            u,
            v,
            point_index,
            score,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchPair {
    pub img_patch_id: usize,
    pub cloud_patch_id: usize,
    pub overlap_2d: f64,
    pub overlap_3d: f64,
}

impl PatchPair {
    /// Bilateral overlap: the smaller of the two sides.
    pub fn overlap(&self) -> f64 {
        self.overlap_2d.min(self.overlap_3d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseMatch {
    pub img_patch: usize,
    pub cloud_patch: usize,
    pub score: f64,
}

/// Distance bands for labelling pixel-point pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelThresholds {
    pub positive_3d_m: f64,
    pub positive_2d_px: f64,
    pub negative_3d_m: f64,
    pub negative_2d_px: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        Self {
            positive_3d_m: 0.0375,
            positive_2d_px: 8.0,
            negative_3d_m: 0.10,
            negative_2d_px: 12.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairLabel {
    Positive,
    Negative,
    Ignored,
}

/// Pairwise cosine similarity; zero-norm rows score 0 against everything.
pub fn cosine_score_map(f_img: &FeatureField, f_cloud: &FeatureField) -> Result<ScoreMap> {
    if f_img.channels() != f_cloud.channels() {
        return Err(Error::ChannelMismatch(f_img.channels(), f_cloud.channels()));
    }
    let a = f_img.normalized();
    let b = f_cloud.normalized();
    let scores = a.matrix() * b.matrix().transpose();
    Ok(ScoreMap {
        scores: scores.map(|s| s.clamp(-1.0, 1.0)),
    })
}

fn by_score_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = by_score_then_index(scores);
    if k < idx.len() {
        idx.select_nth_unstable_by(k, &cmp);
        idx.truncate(k);
    }
    idx.sort_by(&cmp);
    idx
}

/// Mutual top-k selection over a score map, sorted by descending score with
/// ties ordered by `(image, cloud)` index.
pub fn coarse_match(scores: &ScoreMap, top_k: usize) -> Result<Vec<CoarseMatch>> {
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be at least 1".into()));
    }
    let s = &scores.scores;
    let (m, n) = s.shape();
    let row_top: Vec<Vec<usize>> = (0..m)
        .map(|i| {
            let row: Vec<f64> = s.row(i).iter().copied().collect();
            top_k_indices(&row, top_k)
        })
        .collect();
    let mut col_member = vec![vec![false; m]; n];
    for (j, member) in col_member.iter_mut().enumerate() {
        let col: Vec<f64> = s.column(j).iter().copied().collect();
        for i in top_k_indices(&col, top_k) {
            member[i] = true;
        }
    }
    let mut out: Vec<CoarseMatch> = row_top
        .iter()
        .enumerate()
        .flat_map(|(i, cols)| {
            cols.iter()
                .filter(|&&j| col_member[j][i])
                .map(move |&j| CoarseMatch {
                    img_patch: i,
                    cloud_patch: j,
                    score: s[(i, j)],
                })
                .collect::<Vec<_>>()
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.img_patch.cmp(&b.img_patch))
            .then(a.cloud_patch.cmp(&b.cloud_patch))
    });
    Ok(out)
}

fn argmax(values: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Mutual-argmax matching between the rows of two feature sets. Each
/// surviving pixel row yields one correspondence carrying its pixel
/// coordinates and the matched point's cloud index.
pub fn fine_match(
    f_img_patch: &FeatureField,
    f_cloud_patch: &FeatureField,
    pixel_coords: &[(f64, f64)],
    point_indices: &[usize],
    min_score: f64,
) -> Result<Vec<Correspondence>> {
    if pixel_coords.len() != f_img_patch.rows() {
        return Err(Error::LengthMismatch(f_img_patch.rows(), pixel_coords.len()));
    }
    if point_indices.len() != f_cloud_patch.rows() {
        return Err(Error::LengthMismatch(f_cloud_patch.rows(), point_indices.len()));
    }
    let scores = cosine_score_map(f_img_patch, f_cloud_patch)?.scores;
    if scores.ncols() == 0 {
        return Ok(Vec::new());
    }
    let col_best: Vec<usize> = (0..scores.ncols())
        .map(|j| argmax(scores.column(j).iter().copied()).map_or(usize::MAX, |b| b.0))
        .collect();
    let mut out = Vec::new();
    for (i, &(u, v)) in pixel_coords.iter().enumerate() {
        let Some((j, s)) = argmax(scores.row(i).iter().copied()) else {
            continue;
        };
        if col_best[j] == i && s >= min_score {
            out.push(Correspondence::new(u, v, point_indices[j], s));
        }
    }
    Ok(out)
}

/// 3D and 2D residuals of a pixel-point pair under the ground-truth pose.
/// Points behind the camera get an infinite 2D residual.
pub fn pair_distances(
    corr: &Correspondence,
    depth_at_pixel: f64,
    k: &CameraIntrinsics,
    cloud: &PointCloud,
    t_gt: &RigidTransform,
) -> Result<(f64, f64)> {
    let point = cloud
        .points()
        .get(corr.point_index)
        .ok_or_else(|| Error::InvalidArgument(format!("point index {} out of range", corr.point_index)))?;
    let cam = t_gt.apply(point);
    let lifted = backproject_pixel(k, corr.u, corr.v, depth_at_pixel)?;
    let d3 = (cam - lifted).norm();
    let d2 = match project_point(k, &cam) {
        Ok((u, v)) => ((u - corr.u).powi(2) + (v - corr.v).powi(2)).sqrt(),
        Err(_) => f64::INFINITY,
    };
    Ok((d3, d2))
}

/// Positive inside both tight radii, negative beyond either loose radius,
/// ignored in between.
pub fn label_fine_pairs(
    corr: &Correspondence,
    depth_at_pixel: f64,
    k: &CameraIntrinsics,
    cloud: &PointCloud,
    t_gt: &RigidTransform,
    thresholds: &LabelThresholds,
) -> Result<PairLabel> {
    let (d3, d2) = pair_distances(corr, depth_at_pixel, k, cloud, t_gt)?;
    Ok(label_from_distances(d3, d2, thresholds))
}

pub fn label_from_distances(d3: f64, d2: f64, t: &LabelThresholds) -> PairLabel {
    if d3 < t.positive_3d_m && d2 < t.positive_2d_px {
        PairLabel::Positive
    } else if d3 > t.negative_3d_m || d2 > t.negative_2d_px {
        PairLabel::Negative
    } else {
        PairLabel::Ignored
    }
}

/// Bilateral overlap of an image patch and a cloud patch under the
/// ground-truth pose. A pixel overlaps when some patch point lies within both
/// positive radii of it; pixels without valid depth never overlap.
#[allow(clippy::too_many_arguments)]
pub fn patch_overlap(
    img_patch_id: usize,
    img_patch_pixels: &[(f64, f64)],
    cloud_patch_id: usize,
    cloud_patch_points: &[Vec3],
    depth: &DepthMap,
    k: &CameraIntrinsics,
    t_gt: &RigidTransform,
    thresholds: &LabelThresholds,
) -> Result<PatchPair> {
    if img_patch_pixels.is_empty() || cloud_patch_points.is_empty() {
        return Err(Error::EmptyPatch);
    }
    let lifted: Vec<Option<Vec3>> = img_patch_pixels
        .iter()
        .map(|&(u, v)| depth.at(u, v).and_then(|d| backproject_pixel(k, u, v, d).ok()))
        .collect();
    let projected: Vec<(Vec3, Option<(f64, f64)>)> = cloud_patch_points
        .iter()
        .map(|p| {
            let cam = t_gt.apply(p);
            (cam, project_point(k, &cam).ok())
        })
        .collect();
    let mut pixel_hit = vec![false; img_patch_pixels.len()];
    let mut point_hit = vec![false; cloud_patch_points.len()];
    for (i, (&(u, v), lift)) in img_patch_pixels.iter().zip(&lifted).enumerate() {
        let Some(lift) = lift else { continue };
        for (j, (cam, proj)) in projected.iter().enumerate() {
            let Some((pu, pv)) = proj else { continue };
            let d2 = ((pu - u).powi(2) + (pv - v).powi(2)).sqrt();
            if d2 < thresholds.positive_2d_px && (cam - lift).norm() < thresholds.positive_3d_m {
                pixel_hit[i] = true;
                point_hit[j] = true;
            }
        }
    }
    let frac = |hits: &[bool]| hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64;
    Ok(PatchPair {
        img_patch_id,
        cloud_patch_id,
        overlap_2d: frac(&pixel_hit),
        overlap_3d: frac(&point_hit),
    })
}
