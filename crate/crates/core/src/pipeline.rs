//! End-to-end registration on a synthetic scene and its evaluation.
//!
//! Stages: depth corruption, normals for both modalities, constructed
//! features, normal-cue augmentation, k-NN graph attention with gated fusion,
//! patch-level mutual top-k matching, point-level mutual-argmax matching and
//! PnP-RANSAC.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Carrier, FeatureField};
use crate::geometry::{RigidTransform, Vec3};
use crate::graph::{build_knn_graph, gated_fusion, light_gat_forward, GraphAttentionParams};
use crate::losses::{gdc_loss, warmup_weight, LossWeights, WarmupSchedule};
use crate::matching::{coarse_match, cosine_score_map, fine_match, patch_overlap, CoarseMatch, Correspondence, LabelThresholds, PatchPair, ScoreMap};
use crate::metrics::{
    feature_matching_recall, inlier_ratio, mean, median, patch_inlier_ratio, registration_recall, registration_rmse,
    relative_rotation_error, relative_translation_error, MetricThresholds, SceneEvaluation,
};
use crate::normals::{adaptive_neighborhood_sizes, depth_to_normals, estimate_point_normals_varying};
use crate::pose::{pnp_ransac, PointObservation, PoseEstimate, RansacConfig};
use crate::synth::{corrupt_depth, synthesize_features, CorruptionConfig, SceneSpec, SyntheticScene};

/// Every tunable of the pipeline. Missing keys take defaults; unknown keys
/// are rejected when deserialising.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub k_neighbors: usize,
    pub adaptive_k: bool,
    pub top_k_coarse: usize,
    pub min_fine_score: f64,
    pub channels: usize,
    /// Scale of the normal block appended to every descriptor.
    pub normal_feature_weight: f64,
    /// Output bias of the fusion gate; negative values favour the original features.
    pub gate_bias: f64,
    /// Epoch at which the warm-up weight of the graph refinement is read.
    pub epoch: u32,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub voxel_size_m: f64,
    pub params_seed: u64,
    pub scene_seed: u64,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub warmup: WarmupSchedule,
    pub ransac: RansacConfig,
    pub thresholds: MetricThresholds,
    pub labels: LabelThresholds,
    pub corruption: CorruptionConfig,
    pub scene: SceneSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 8,
            adaptive_k: false,
            top_k_coarse: 3,
            min_fine_score: 0.7,
            channels: 96,
            normal_feature_weight: 0.5,
            gate_bias: -2.0,
            epoch: 20,
            tile_rows: 6,
            tile_cols: 8,
            voxel_size_m: 0.3,
            params_seed: 7,
            scene_seed: 0,
            batch_size: 10,
            loss_weights: LossWeights::default(),
            warmup: WarmupSchedule::default(),
            ransac: RansacConfig::default(),
            thresholds: MetricThresholds::default(),
            labels: LabelThresholds::default(),
            corruption: CorruptionConfig::default(),
            scene: SceneSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors == 0 {
            return Err(Error::InvalidArgument("k_neighbors must be positive".into()));
        }
        if self.top_k_coarse == 0 || self.tile_rows == 0 || self.tile_cols == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "top_k_coarse, tile grid and batch_size must be positive".into(),
            ));
        }
        if !(self.voxel_size_m > 0.0) {
            return Err(Error::InvalidArgument("voxel_size_m must be positive".into()));
        }
        if !(self.normal_feature_weight >= 0.0) {
            return Err(Error::InvalidArgument("normal_feature_weight must be non-negative".into()));
        }
        if self.warmup.start_epoch > self.warmup.end_epoch {
            return Err(Error::InvalidArgument("warm-up start after end".into()));
        }
        self.loss_weights.validate()?;
        self.ransac.validate()?;
        self.corruption.validate()?;
        self.scene.intrinsics.validate()
    }
}

/// One selected patch pair together with its members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMatch {
    pub img_patch: usize,
    pub cloud_patch: usize,
    pub score: f64,
    pub pixels: Vec<(f64, f64)>,
    pub points: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub image_keypoints: usize,
    pub valid_image_normals: usize,
    pub valid_cloud_normals: usize,
    pub coarse_matches: usize,
    pub refinement_weight: f64,
    /// Self-similarity discrepancy of the matched, fused descriptors.
    pub gdc_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub correspondences: Vec<Correspondence>,
    pub patches: Vec<PatchMatch>,
    pub pose: std::result::Result<PoseEstimate, Error>,
    pub diagnostics: Diagnostics,
}

fn normal_block(n: Option<&Vec3>) -> [f64; 3] {
    match n {
        Some(n) if n.z < 0.0 => [-n.x, -n.y, -n.z],
        Some(n) => [n.x, n.y, n.z],
        None => [0.0; 3],
    }
}

fn augment(features: &DMatrix<f64>, blocks: &[[f64; 3]], weight: f64, carrier: Carrier) -> Result<FeatureField> {
    let (m, c) = features.shape();
    let mut out = DMatrix::zeros(m, c + 3);
    for i in 0..m {
        out.view_mut((i, 0), (1, c)).copy_from(&features.row(i));
        for (j, b) in blocks[i].iter().enumerate() {
            out[(i, c + j)] = weight * b;
        }
    }
    Ok(FeatureField::new(out, carrier)?.normalized())
}

fn refine(field: &FeatureField, graph_positions: Refinable<'_>, k: usize, params: &GraphAttentionParams, strength: f64) -> Result<FeatureField> {
    if field.rows() < 2 || strength == 0.0 {
        return Ok(field.clone());
    }
    let graph = match graph_positions {
        Refinable::Pixels(p) => build_knn_graph(p, k)?,
        Refinable::Points(p) => build_knn_graph(p, k)?,
    };
    let aggregated = light_gat_forward(&graph, field, params)?;
    let fused = gated_fusion(field, &aggregated, params)?;
    let blended = field.matrix() + (fused.matrix() - field.matrix()) * strength;
    Ok(FeatureField::new(blended, field.carrier())?.normalized())
}

enum Refinable<'a> {
    Pixels(&'a [[f64; 2]]),
    Points(&'a [[f64; 3]]),
}

/// Row-normalised mean descriptor per group.
fn pooled(field: &FeatureField, groups: &[Vec<usize>]) -> Result<FeatureField> {
    let c = field.channels();
    let mut out = DMatrix::zeros(groups.len(), c);
    for (g, members) in groups.iter().enumerate() {
        for &i in members {
            let row = field.matrix().row(i).into_owned();
            let mut target = out.row_mut(g);
            target += row;
        }
    }
    Ok(FeatureField::new(out, field.carrier())?.normalized())
}

/// Runs the full pipeline on `scene`.
pub fn run_registration(scene: &SyntheticScene, cfg: &PipelineConfig) -> Result<Registration> {
    cfg.validate()?;
    let k = &scene.intrinsics;
    let corrupted = corrupt_depth(&scene.depth, &cfg.corruption)?;
    let image_normals = depth_to_normals(&corrupted);
    // covariance normals need three neighbours; smaller k only affects the graphs
    let k_normals = cfg.k_neighbors.max(3);
    let ks = if cfg.adaptive_k {
        adaptive_neighborhood_sizes(&scene.cloud, k_normals)?
    } else {
        vec![k_normals; scene.cloud.len()]
    };
    let cloud_normals = estimate_point_normals_varying(&scene.cloud, &ks)?;
    let feats = synthesize_features(scene, cfg.channels, &cfg.corruption)?;

    // keypoints need a normal cue; rows without one are dropped
    let width = corrupted.width();
    let keep: Vec<usize> = feats
        .pixels
        .iter()
        .enumerate()
        .filter(|(_, (u, v))| image_normals.get(v.round() as usize * width + u.round() as usize).is_some())
        .map(|(i, _)| i)
        .collect();
    let pixels: Vec<(f64, f64)> = keep.iter().map(|&i| feats.pixels[i]).collect();
    let img_raw = feats.image.select_rows(&keep);
    let img_blocks: Vec<[f64; 3]> = pixels
        .iter()
        .map(|(u, v)| normal_block(image_normals.get(v.round() as usize * width + u.round() as usize)))
        .collect();
    let rot = scene.gt_transform.rotation();
    let cloud_blocks: Vec<[f64; 3]> = (0..scene.cloud.len())
        .map(|i| normal_block(cloud_normals.get(i).map(|n| rot * n).as_ref()))
        .collect();
    let w = cfg.normal_feature_weight;
    let img_aug = augment(img_raw.matrix(), &img_blocks, w, Carrier::Image)?;
    let cloud_aug = augment(feats.cloud.matrix(), &cloud_blocks, w, Carrier::Cloud)?;

    let mut params = GraphAttentionParams::seeded(img_aug.channels(), cfg.params_seed);
    params.gate_out_bias.fill(cfg.gate_bias);
    let strength = warmup_weight(cfg.epoch, &cfg.warmup);
    let pixel_pos: Vec<[f64; 2]> = pixels.iter().map(|&(u, v)| [u, v]).collect();
    let point_pos: Vec<[f64; 3]> = scene.cloud.points().iter().map(|p| [p.x, p.y, p.z]).collect();
    let img_feat = refine(&img_aug, Refinable::Pixels(&pixel_pos), cfg.k_neighbors, &params, strength)?;
    let cloud_feat = refine(&cloud_aug, Refinable::Points(&point_pos), cfg.k_neighbors, &params, strength)?;

    // patches: image tiles and cloud voxels
    let tile_w = (k.width as f64 / cfg.tile_cols as f64).max(1.0);
    let tile_h = (k.height as f64 / cfg.tile_rows as f64).max(1.0);
    let mut tiles: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &(u, v)) in pixels.iter().enumerate() {
        let col = ((u / tile_w) as usize).min(cfg.tile_cols - 1);
        let row = ((v / tile_h) as usize).min(cfg.tile_rows - 1);
        tiles.entry(row * cfg.tile_cols + col).or_default().push(i);
    }
    let mut voxels: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in scene.cloud.points().iter().enumerate() {
        let key = (
            (p.x / cfg.voxel_size_m).floor() as i64,
            (p.y / cfg.voxel_size_m).floor() as i64,
            (p.z / cfg.voxel_size_m).floor() as i64,
        );
        voxels.entry(key).or_default().push(i);
    }
    let tile_ids: Vec<usize> = tiles.keys().copied().collect();
    let tile_members: Vec<Vec<usize>> = tiles.into_values().collect();
    let voxel_members: Vec<Vec<usize>> = voxels.into_values().collect();

    let mut coarse: Vec<CoarseMatch> = Vec::new();
    if !tile_members.is_empty() {
        let img_patches = pooled(&img_feat, &tile_members)?;
        let cloud_patches = pooled(&cloud_feat, &voxel_members)?;
        let scores: ScoreMap = cosine_score_map(&img_patches, &cloud_patches)?;
        coarse = coarse_match(&scores, cfg.top_k_coarse)?;
    }

    let mut best: BTreeMap<usize, Correspondence> = BTreeMap::new();
    let mut row_of_pixel: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    for (i, &(u, v)) in pixels.iter().enumerate() {
        row_of_pixel.insert((u.to_bits(), v.to_bits()), i);
    }
    let mut patches = Vec::with_capacity(coarse.len());
    for m in &coarse {
        let rows = &tile_members[m.img_patch];
        let pts = &voxel_members[m.cloud_patch];
        let px: Vec<(f64, f64)> = rows.iter().map(|&r| pixels[r]).collect();
        let found = fine_match(
            &img_feat.select_rows(rows),
            &cloud_feat.select_rows(pts),
            &px,
            pts,
            cfg.min_fine_score,
        )?;
        for c in found {
            let row = row_of_pixel[&(c.u.to_bits(), c.v.to_bits())];
            let replace = best.get(&row).is_none_or(|b| {
                c.score > b.score || (c.score == b.score && c.point_index < b.point_index)
            });
            if replace {
                best.insert(row, c);
            }
        }
        patches.push(PatchMatch {
            img_patch: tile_ids[m.img_patch],
            cloud_patch: m.cloud_patch,
            score: m.score,
            pixels: px,
            points: pts.clone(),
        });
    }
    let matched_rows: Vec<usize> = best.keys().copied().collect();
    let correspondences: Vec<Correspondence> = best.into_values().collect();

    let gdc = if correspondences.len() >= 2 {
        let cloud_rows: Vec<usize> = correspondences.iter().map(|c| c.point_index).collect();
        gdc_loss(&img_feat.select_rows(&matched_rows), &cloud_feat.select_rows(&cloud_rows))
            .ok()
            .map(|g| g.value)
    } else {
        None
    };

    let observations: Vec<PointObservation> = correspondences
        .iter()
        .map(|c| PointObservation::new(c.u, c.v, scene.cloud.points()[c.point_index]))
        .collect();
    let pose = pnp_ransac(&observations, k, &cfg.ransac);
    Ok(Registration {
        diagnostics: Diagnostics {
            image_keypoints: pixels.len(),
            valid_image_normals: image_normals.valid_count(),
            valid_cloud_normals: cloud_normals.valid_count(),
            coarse_matches: coarse.len(),
            refinement_weight: strength,
            gdc_loss: gdc,
        },
        correspondences,
        patches,
        pose,
    })
}

/// Metrics of one registration result against the scene ground truth.
pub fn evaluate_scene(
    name: &str,
    scene: &SyntheticScene,
    correspondences: &[Correspondence],
    pose: Option<&RigidTransform>,
    patches: &[PatchMatch],
    cfg: &PipelineConfig,
) -> Result<SceneEvaluation> {
    let t = &cfg.thresholds;
    let ir = match inlier_ratio(correspondences, &scene.depth, &scene.intrinsics, &scene.cloud, &scene.gt_transform, t.tau1) {
        Ok(v) => v,
        Err(Error::EmptyCorrespondences) => 0.0,
        Err(e) => return Err(e),
    };
    let pair_overlaps = patches
        .iter()
        .filter(|p| !p.pixels.is_empty() && !p.points.is_empty())
        .map(|p| {
            let pts: Vec<Vec3> = p.points.iter().map(|&i| scene.cloud.points()[i]).collect();
            patch_overlap(
                p.img_patch,
                &p.pixels,
                p.cloud_patch,
                &pts,
                &scene.depth,
                &scene.intrinsics,
                &scene.gt_transform,
                &cfg.labels,
            )
        })
        .collect::<Result<Vec<PatchPair>>>()?;
    let pir = patch_inlier_ratio(&pair_overlaps, t.pir).ok();
    let gt = &scene.gt_transform;
    let (rmse, rre, rte) = match pose {
        Some(est) => (
            Some(registration_rmse(&scene.cloud, est, gt)?),
            Some(relative_rotation_error(gt.rotation(), est.rotation())?),
            Some(relative_translation_error(gt.translation(), est.translation())),
        ),
        None => (None, None, None),
    };
    Ok(SceneEvaluation {
        scene: name.to_string(),
        inlier_ratio: ir,
        fmr_flag: ir > t.tau2,
        rmse_m: rmse,
        rr_flag: rmse.is_some_and(|r| r < t.tau3),
        pir,
        rre_deg: rre,
        rte_m: rte,
        correspondences: correspondences.len(),
        thresholds: *t,
    })
}

/// Batch summary: per-scene means and medians, with FMR and RR as recalls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub inlier_ratio: f64,
    pub fmr: f64,
    pub rr: f64,
    pub pir: Option<f64>,
    pub rre_deg: Option<f64>,
    pub rte_m: Option<f64>,
    pub rmse_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scenes: Vec<SceneEvaluation>,
    pub mean: Aggregate,
    pub median: Aggregate,
}

pub fn aggregate(scenes: Vec<SceneEvaluation>, thresholds: &MetricThresholds) -> Result<EvaluationReport> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput);
    }
    let irs: Vec<f64> = scenes.iter().map(|s| s.inlier_ratio).collect();
    let rmses: Vec<f64> = scenes.iter().map(|s| s.rmse_m.unwrap_or(f64::INFINITY)).collect();
    let fmr = feature_matching_recall(&irs, thresholds.tau2)?;
    let rr = registration_recall(&rmses, thresholds.tau3)?;
    let pick = |f: fn(&SceneEvaluation) -> Option<f64>| -> Vec<f64> { scenes.iter().filter_map(f).collect() };
    let pirs = pick(|s| s.pir);
    let rres = pick(|s| s.rre_deg);
    let rtes = pick(|s| s.rte_m);
    let finite_rmse = pick(|s| s.rmse_m);
    let summarize = |stat: fn(&[f64]) -> Option<f64>| Aggregate {
        inlier_ratio: stat(&irs).unwrap_or(0.0),
        fmr,
        rr,
        pir: stat(&pirs),
        rre_deg: stat(&rres),
        rte_m: stat(&rtes),
        rmse_m: stat(&finite_rmse),
    };
    let mean_row = summarize(mean);
    let median_row = summarize(median);
    Ok(EvaluationReport {
        scenes,
        mean: mean_row,
        median: median_row,
    })
}

/// Generates the `index`-th scene of a batch: seed `scene_seed + index`.
pub fn batch_scene(cfg: &PipelineConfig, index: usize) -> Result<SyntheticScene> {
    crate::synth::generate_scene(&cfg.scene, cfg.scene_seed + index as u64)
}

/// Registers and evaluates one batch scene.
pub fn run_and_evaluate(cfg: &PipelineConfig, index: usize) -> Result<SceneEvaluation> {
    let scene = batch_scene(cfg, index)?;
    let reg = run_registration(&scene, cfg)?;
    let pose = reg.pose.as_ref().ok().map(|p| p.transform);
    evaluate_scene(
        &format!("scene_{index:03}"),
        &scene,
        &reg.correspondences,
        pose.as_ref(),
        &reg.patches,
        cfg,
    )
}
