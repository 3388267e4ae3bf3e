use i2p_core::geometry::{project_point, CameraIntrinsics, DepthMap, Vec3};
use i2p_core::matching::{cosine_score_map, fine_match, LabelThresholds};
use i2p_core::metrics::inlier_ratio;
use i2p_core::normals::depth_to_normals;
use i2p_core::synth::{
    check_scene_consistency, corrupt_depth, generate_scene, synthesize_features, CorruptionConfig, Primitive,
    SceneSpec, SyntheticScene,
};
use i2p_core::Error;

fn wall_spec(max_rotation_deg: f64, max_translation_m: f64) -> SceneSpec {
    SceneSpec {
        primitives: vec![Primitive::Rect {
            center: [0.0, 0.0, 2.0],
            axis_u: [1.0, 0.0, 0.0],
            axis_v: [0.0, 1.0, 0.0],
            half_u: 3.0,
            half_v: 3.0,
        }],
        point_count: 2000,
        max_rotation_deg,
        max_translation_m,
        ..SceneSpec::default()
    }
}

#[test]
fn fronto_parallel_plane_renders_constant_depth() {
    let scene = generate_scene(&wall_spec(0.0, 0.0), 1).unwrap();
    assert_eq!(scene.depth.valid_count(), 160 * 120);
    for d in scene.depth.values() {
        assert!((d - 2.0).abs() < 1e-6);
    }
    let normals = depth_to_normals(&scene.depth);
    for (n, ok) in normals.normals().iter().zip(normals.valid_mask()) {
        if *ok {
            assert!((n - Vec3::z()).norm() < 1e-6);
        }
    }
    assert!(normals.valid_count() > 0);
}

#[test]
fn identity_pose_pairs_are_direct_projections() {
    let scene = generate_scene(&wall_spec(0.0, 0.0), 2).unwrap();
    assert_eq!(scene.gt_transform.translation().norm(), 0.0);
    for g in &scene.gt_correspondences {
        let (u, v) = project_point(&scene.intrinsics, &scene.cloud.points()[g.point_index]).unwrap();
        assert_eq!((u, v), (g.u, g.v));
    }
}

#[test]
fn generated_scenes_are_self_consistent() {
    for seed in 0..20 {
        let scene = generate_scene(&SceneSpec::default(), seed).unwrap();
        assert!(scene.gt_correspondences.len() >= 50);
        check_scene_consistency(&scene, &LabelThresholds::default()).unwrap();
        // one point per pixel
        let mut pixels: Vec<(i64, i64)> = scene.gt_correspondences.iter().map(|g| (g.u.round() as i64, g.v.round() as i64)).collect();
        pixels.sort_unstable();
        pixels.dedup();
        assert_eq!(pixels.len(), scene.gt_correspondences.len());
    }
}

#[test]
fn generation_rejects_bad_specs() {
    let few = SceneSpec {
        point_count: 99,
        ..SceneSpec::default()
    };
    assert!(matches!(generate_scene(&few, 0), Err(Error::InvalidArgument(_))));
    let none = SceneSpec {
        primitives: vec![],
        ..SceneSpec::default()
    };
    assert!(matches!(generate_scene(&none, 0), Err(Error::InvalidArgument(_))));
    let behind = SceneSpec {
        primitives: vec![Primitive::Sphere {
            center: [0.0, 0.0, -5.0],
            radius: 1.0,
        }],
        max_rotation_deg: 0.0,
        max_translation_m: 0.0,
        ..SceneSpec::default()
    };
    assert!(matches!(generate_scene(&behind, 0), Err(Error::EmptyVisibleSet)));
}

fn bits(scene: &SyntheticScene) -> Vec<u64> {
    let mut out: Vec<u64> = scene.cloud.points().iter().flat_map(|p| p.iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect();
    out.extend(scene.depth.values().iter().map(|x| x.to_bits()));
    out.extend(scene.gt_transform.rotation_row_major().iter().map(|x| x.to_bits()));
    out
}

#[test]
fn same_seed_is_bit_identical() {
    let a = generate_scene(&SceneSpec::default(), 9).unwrap();
    let b = generate_scene(&SceneSpec::default(), 9).unwrap();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.gt_correspondences, b.gt_correspondences);
    let c = generate_scene(&SceneSpec::default(), 10).unwrap();
    assert_ne!(bits(&a), bits(&c));

    let noise = CorruptionConfig {
        feature_noise_sigma: 0.2,
        outlier_fraction: 0.1,
        gaussian_sigma_m: 0.01,
        mask_ratio: 0.2,
        seed: 4,
    };
    let fa = synthesize_features(&a, 32, &noise).unwrap();
    let fb = synthesize_features(&b, 32, &noise).unwrap();
    assert_eq!(fa, fb);
    let da = corrupt_depth(&a.depth, &noise).unwrap();
    let db = corrupt_depth(&b.depth, &noise).unwrap();
    assert_eq!(
        da.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        db.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(da.valid_mask(), db.valid_mask());
}

#[test]
fn noiseless_features_pair_exactly() {
    let scene = generate_scene(&SceneSpec::default(), 3).unwrap();
    let f = synthesize_features(&scene, 256, &CorruptionConfig::default()).unwrap();
    let n = scene.gt_correspondences.len();
    assert!(f.image.rows() > n);
    let scores = cosine_score_map(&f.image, &f.cloud).unwrap().scores;
    for (i, g) in scene.gt_correspondences.iter().enumerate() {
        assert!((scores[(i, g.point_index)] - 1.0).abs() < 1e-12);
        assert_eq!(f.pixel_partner[i], Some(g.point_index));
        assert_eq!(f.pixels[i], (g.u, g.v));
    }
    // off-diagonal cosines of random unit vectors in 256-d are O(1/16)
    let mut off = 0.0;
    let mut count = 0.0;
    for i in 0..n.min(50) {
        for j in 0..f.cloud.rows().min(50) {
            if j != scene.gt_correspondences[i].point_index {
                off += scores[(i, j)].abs();
                count += 1.0;
            }
        }
    }
    assert!(off / count < 0.1);
    assert!(f.pixel_partner[n..].iter().all(Option::is_none));
    assert!(matches!(
        synthesize_features(&scene, 3, &CorruptionConfig::default()),
        Err(Error::InvalidArgument(_))
    ));
}

fn fine_ir(scene: &SyntheticScene, noise: &CorruptionConfig) -> (f64, usize) {
    let f = synthesize_features(scene, 64, noise).unwrap();
    let indices: Vec<usize> = (0..scene.cloud.len()).collect();
    let corrs = fine_match(&f.image, &f.cloud, &f.pixels, &indices, 0.0).unwrap();
    let ir = inlier_ratio(&corrs, &scene.depth, &scene.intrinsics, &scene.cloud, &scene.gt_transform, 0.05).unwrap();
    let correct = corrs
        .iter()
        .filter(|c| {
            scene
                .gt_correspondences
                .iter()
                .any(|g| g.u == c.u && g.v == c.v && g.point_index == c.point_index)
        })
        .count();
    (ir, correct)
}

#[test]
fn feature_noise_sweep_lowers_inlier_ratio() {
    for seed in 0..3 {
        let scene = generate_scene(&SceneSpec::default(), seed).unwrap();
        let mut prev = f64::INFINITY;
        for sigma in [0.0, 0.2, 0.5] {
            let (ir, _) = fine_ir(
                &scene,
                &CorruptionConfig {
                    feature_noise_sigma: sigma,
                    seed: 11,
                    ..CorruptionConfig::default()
                },
            );
            assert!(ir <= prev + 1e-12, "seed {seed}: sigma {sigma} gave {ir} after {prev}");
            prev = ir;
        }
    }
}

#[test]
fn full_outlier_features_leave_almost_no_true_matches() {
    let scene = generate_scene(&SceneSpec::default(), 5).unwrap();
    let (_, clean) = fine_ir(&scene, &CorruptionConfig::default());
    let (_, broken) = fine_ir(
        &scene,
        &CorruptionConfig {
            outlier_fraction: 1.0,
            seed: 3,
            ..CorruptionConfig::default()
        },
    );
    assert_eq!(clean, scene.gt_correspondences.len());
    assert!((broken as f64) < 0.02 * clean as f64, "{broken} of {clean}");
}

#[test]
fn zero_corruption_is_identity() {
    let scene = generate_scene(&SceneSpec::default(), 6).unwrap();
    let out = corrupt_depth(&scene.depth, &CorruptionConfig::default()).unwrap();
    assert_eq!(out, scene.depth);
    let bad = CorruptionConfig {
        gaussian_sigma_m: -1.0,
        ..CorruptionConfig::default()
    };
    assert!(corrupt_depth(&scene.depth, &bad).is_err());
}

#[test]
fn mask_ratio_counts() {
    let depth = DepthMap::from_fn(640, 480, |_, _| 1.5);
    for ratio in [0.1, 0.2, 0.3, 0.4] {
        let out = corrupt_depth(
            &depth,
            &CorruptionConfig {
                mask_ratio: ratio,
                seed: 8,
                ..CorruptionConfig::default()
            },
        )
        .unwrap();
        let invalid = 1.0 - out.valid_count() as f64 / (640.0 * 480.0);
        assert!((invalid - ratio).abs() <= 0.02, "{ratio}: {invalid}");
    }
}

#[test]
fn gaussian_noise_std() {
    let depth = DepthMap::from_fn(640, 480, |u, v| 1.0 + 0.001 * (u + v) as f64);
    let sigma = 0.015;
    let out = corrupt_depth(
        &depth,
        &CorruptionConfig {
            gaussian_sigma_m: sigma,
            seed: 21,
            ..CorruptionConfig::default()
        },
    )
    .unwrap();
    let residuals: Vec<f64> = out.values().iter().zip(depth.values()).map(|(a, b)| a - b).collect();
    assert!(residuals.len() >= 100_000);
    let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
    let var = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (residuals.len() - 1) as f64;
    assert!((var.sqrt() - sigma).abs() < 0.1 * sigma);
}

#[test]
fn masking_keeps_other_pixels_untouched() {
    let k = CameraIntrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap();
    let depth = DepthMap::from_fn(k.width, k.height, |u, v| 2.0 + 0.01 * u as f64 - 0.02 * v as f64);
    let out = corrupt_depth(
        &depth,
        &CorruptionConfig {
            mask_ratio: 0.25,
            seed: 2,
            ..CorruptionConfig::default()
        },
    )
    .unwrap();
    for v in 0..k.height {
        for u in 0..k.width {
            if let Some(d) = out.get(u, v) {
                assert_eq!(Some(d), depth.get(u, v));
            }
        }
    }
}
