use i2p_core::geometry::{check_rotation, project_point, CameraIntrinsics, RigidTransform, Vec3};
use i2p_core::metrics::{relative_rotation_error, relative_translation_error};
use i2p_core::pose::{
    dlt_pose, planar_pose, pnp_ransac, pnp_solve, refine_pose, reprojection_error, PointObservation, RansacConfig,
};
use i2p_core::synth::{generate_scene, SceneSpec};
use i2p_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(150.0, 150.0, 80.0, 60.0, 160, 120).unwrap()
}

fn random_pose(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let t = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    RigidTransform::from_axis_angle(axis.normalize() * rng.random_range(0.0..0.6), t)
}

/// Points in front of the camera expressed in the cloud frame, with exact projections.
fn observations(rng: &mut ChaCha8Rng, t: &RigidTransform, k: &CameraIntrinsics, n: usize) -> Vec<PointObservation> {
    let inv = t.inverse();
    (0..n)
        .map(|_| {
            let cam = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.8..0.8), rng.random_range(2.0..4.0));
            let (u, v) = project_point(k, &cam).unwrap();
            PointObservation::new(u, v, inv.apply(&cam))
        })
        .collect()
}

/// Geodesic angle from the chord `|Ra - Rb|_F = 2 sqrt(2) sin(theta / 2)`,
/// accurate near zero where the trace formula is not.
fn rotation_angle(a: &RigidTransform, b: &RigidTransform) -> f64 {
    let chord = (a.rotation() - b.rotation()).norm();
    2.0 * (chord / (2.0 * 2f64.sqrt())).min(1.0).asin()
}

#[test]
fn eight_noiseless_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = intrinsics();
    for _ in 0..50 {
        let t = random_pose(&mut rng);
        let obs = observations(&mut rng, &t, &k, 8);
        let est = pnp_solve(&obs, &k).unwrap();
        assert!(rotation_angle(&est, &t) < 1e-6);
        assert!((est.translation() - t.translation()).norm() < 1e-8);
        check_rotation(est.rotation()).unwrap();
    }
}

#[test]
fn identity_and_small_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = intrinsics();
    let id = RigidTransform::identity();
    let obs = observations(&mut rng, &id, &k, 10);
    let est = pnp_solve(&obs, &k).unwrap();
    assert!(rotation_angle(&est, &id) < 1e-9);
    assert!(est.translation().norm() < 1e-9);
    assert!(matches!(
        pnp_solve(&obs[..5], &k),
        Err(Error::InsufficientPoints { needed: 6, got: 5 })
    ));
}

#[test]
fn ground_truth_reprojects_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = intrinsics();
    let t = random_pose(&mut rng);
    for o in observations(&mut rng, &t, &k, 100) {
        assert!(reprojection_error(&t, &k, &o) < 1e-9);
    }
}

#[test]
fn coplanar_points_need_the_planar_solver() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = intrinsics();
    let t = random_pose(&mut rng);
    let inv = t.inverse();
    let obs: Vec<PointObservation> = (0..30)
        .map(|_| {
            let cam = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.8..0.8), 3.0);
            let (u, v) = project_point(&k, &cam).unwrap();
            PointObservation::new(u, v, inv.apply(&cam))
        })
        .collect();
    assert!(matches!(dlt_pose(&obs, &k), Err(Error::DegenerateConfiguration(_))));
    let planar = planar_pose(&obs, &k).unwrap();
    assert!(rotation_angle(&planar, &t) < 1e-6);
    let est = pnp_solve(&obs, &k).unwrap();
    assert!(rotation_angle(&est, &t) < 1e-8);
    assert!((est.translation() - t.translation()).norm() < 1e-8);
}

#[test]
fn collinear_points_are_degenerate() {
    let k = intrinsics();
    let obs: Vec<PointObservation> = (0..10)
        .map(|i| {
            let p = Vec3::new(-0.5 + 0.1 * i as f64, 0.2, 3.0);
            let (u, v) = project_point(&k, &p).unwrap();
            PointObservation::new(u, v, p)
        })
        .collect();
    assert!(matches!(pnp_solve(&obs, &k), Err(Error::DegenerateConfiguration(_))));
}

#[test]
fn refinement_never_increases_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = intrinsics();
    let t = random_pose(&mut rng);
    let obs = observations(&mut rng, &t, &k, 40);
    let cost = |p: &RigidTransform| obs.iter().map(|o| reprojection_error(p, &k, o).powi(2)).sum::<f64>();
    for _ in 0..20 {
        let start = t.compose(&RigidTransform::from_axis_angle(
            Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0),
            Vec3::new(rng.random_range(-0.05..0.05), 0.0, 0.0),
        ));
        let refined = refine_pose(&start, &obs, &k);
        assert!(cost(&refined) <= cost(&start));
        assert!(rotation_angle(&refined, &t) < 1e-8);
    }
}

fn scene_observations(seed: u64, n: usize) -> (Vec<PointObservation>, RigidTransform, CameraIntrinsics) {
    let scene = generate_scene(&SceneSpec::default(), seed).unwrap();
    let t = scene.gt_transform;
    let k = scene.intrinsics;
    let obs: Vec<PointObservation> = scene
        .gt_correspondences
        .iter()
        .take(n)
        .map(|g| {
            let p = scene.cloud.points()[g.point_index];
            let (u, v) = project_point(&k, &t.apply(&p)).unwrap();
            PointObservation::new(u, v, p)
        })
        .collect();
    (obs, t, k)
}

#[test]
fn ransac_on_clean_scenes() {
    for seed in 0..10 {
        let (obs, t, k) = scene_observations(seed, 100);
        assert!(obs.len() >= 50);
        let est = pnp_ransac(&obs, &k, &RansacConfig::default()).unwrap();
        assert_eq!(est.inlier_count(), obs.len());
        assert!(relative_rotation_error(t.rotation(), est.transform.rotation()).unwrap() < 0.1);
        assert!(relative_translation_error(t.translation(), est.transform.translation()) < 1e-3);
    }
}

/// Replaces 30% of the observations with uniform pixels at least 20 px from
/// the true projection; returns the planted inlier mask.
fn plant_outliers(rng: &mut ChaCha8Rng, obs: &mut [PointObservation], k: &CameraIntrinsics) -> Vec<bool> {
    let n = obs.len();
    let mut mask = vec![true; n];
    let planted = rand::seq::index::sample(rng, n, (0.3 * n as f64).round() as usize);
    for i in planted {
        mask[i] = false;
        loop {
            let (u, v) = (rng.random_range(0.0..k.width as f64), rng.random_range(0.0..k.height as f64));
            if ((u - obs[i].u).powi(2) + (v - obs[i].v).powi(2)).sqrt() > 20.0 {
                obs[i].u = u;
                obs[i].v = v;
                break;
            }
        }
    }
    mask
}

#[test]
fn ransac_with_planted_outliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ok = 0;
    for trial in 0..100u64 {
        let (mut obs, t, k) = scene_observations(trial % 20, 100);
        let mask = plant_outliers(&mut rng, &mut obs, &k);
        let cfg = RansacConfig {
            seed: trial,
            ..RansacConfig::default()
        };
        let started = std::time::Instant::now();
        let Ok(est) = pnp_ransac(&obs, &k, &cfg) else { continue };
        assert!(started.elapsed().as_secs_f64() < 5.0);
        let rre = relative_rotation_error(t.rotation(), est.transform.rotation()).unwrap();
        let rte = relative_translation_error(t.translation(), est.transform.translation());
        if rre < 0.1 && rte < 1e-3 && est.inlier_mask == mask {
            ok += 1;
        }
    }
    assert!(ok >= 95, "{ok}/100");
}

#[test]
fn all_outliers_yield_no_consensus() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let k = intrinsics();
    let obs: Vec<PointObservation> = (0..60)
        .map(|_| {
            PointObservation::new(
                rng.random_range(0.0..160.0),
                rng.random_range(0.0..120.0),
                Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.0..4.0)),
            )
        })
        .collect();
    let cfg = RansacConfig {
        inlier_threshold_px: 1.0,
        ..RansacConfig::default()
    };
    assert!(matches!(pnp_ransac(&obs, &k, &cfg), Err(Error::NoConsensus { .. })));
}

#[test]
fn ransac_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut obs, _, k) = scene_observations(3, 80);
    plant_outliers(&mut rng, &mut obs, &k);
    let cfg = RansacConfig {
        seed: 42,
        ..RansacConfig::default()
    };
    let a = pnp_ransac(&obs, &k, &cfg).unwrap();
    let b = pnp_ransac(&obs, &k, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        a.mean_reprojection_error.to_bits(),
        b.mean_reprojection_error.to_bits()
    );
}
