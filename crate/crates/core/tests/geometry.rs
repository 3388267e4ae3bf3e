use i2p_core::geometry::{backproject_pixel, project_point, CameraIntrinsics, RigidTransform, Vec3};
use i2p_core::Error;
use nalgebra::{Matrix3, Matrix4, Rotation3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let t = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    RigidTransform::from_axis_angle(axis * 2.0, t)
}

fn homogeneous(t: &RigidTransform) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    for r in 0..3 {
        for c in 0..3 {
            m[(r, c)] = t.rotation()[(r, c)];
        }
        m[(r, 3)] = t.translation()[r];
    }
    m
}

#[test]
fn trivial_transforms() {
    let p = Vec3::new(1.0, 2.0, 3.0);
    assert_eq!(RigidTransform::identity().apply(&p), p);
    let r = Rotation3::from_axis_angle(&Vec3::z_axis(), std::f64::consts::FRAC_PI_2).into_inner();
    let t = RigidTransform::new(r, Vec3::zeros()).unwrap();
    assert!((t.apply(&Vec3::x()) - Vec3::y()).norm() < 1e-15);
}

#[test]
fn matches_homogeneous_multiply() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let t = random_transform(&mut rng);
        let p = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let h = homogeneous(&t) * Vector4::new(p.x, p.y, p.z, 1.0);
        assert!((t.apply(&p) - h.xyz()).norm() < 1e-12);

        let u = random_transform(&mut rng);
        let composed = homogeneous(&t.compose(&u));
        assert!((composed - homogeneous(&t) * homogeneous(&u)).norm() < 1e-12);
        let round = t.inverse().apply(&t.apply(&p));
        assert!((round - p).norm() < 1e-12);
    }
}

#[test]
fn rejects_non_rotations() {
    let m = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
    assert!(matches!(RigidTransform::new(m, Vec3::zeros()), Err(Error::InvalidTransform(_))));
    let scaled = Matrix3::identity() * 1.1;
    assert!(RigidTransform::new(scaled, Vec3::zeros()).is_err());
    assert!(RigidTransform::new(Matrix3::identity(), Vec3::new(f64::NAN, 0.0, 0.0)).is_err());
}

#[test]
fn row_major_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = random_transform(&mut rng);
    let tr = t.translation();
    let back = RigidTransform::from_row_major(t.rotation_row_major(), [tr.x, tr.y, tr.z]).unwrap();
    assert_eq!(back, t);
}

#[test]
fn projection_examples() {
    let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
    assert_eq!(project_point(&k, &Vec3::new(0.0, 0.0, 1.0)).unwrap(), (50.0, 50.0));
    assert_eq!(project_point(&k, &Vec3::new(0.5, 0.0, 1.0)).unwrap(), (100.0, 50.0));
    assert_eq!(backproject_pixel(&k, 50.0, 50.0, 2.0).unwrap(), Vec3::new(0.0, 0.0, 2.0));
    assert_eq!(backproject_pixel(&k, 100.0, 50.0, 1.0).unwrap(), Vec3::new(0.5, 0.0, 1.0));
    assert!(matches!(project_point(&k, &Vec3::new(0.0, 0.0, 0.0)), Err(Error::NonPositiveDepth(_))));
    assert!(matches!(backproject_pixel(&k, 1.0, 1.0, -1.0), Err(Error::NonPositiveDepth(_))));
}

#[test]
fn projection_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = CameraIntrinsics::new(150.0, 140.0, 80.0, 60.0, 160, 120).unwrap();
    for _ in 0..500 {
        let p = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.1..6.0));
        let (u, v) = project_point(&k, &p).unwrap();
        assert!((backproject_pixel(&k, u, v, p.z).unwrap() - p).norm() < 1e-9);
        let (u, v) = (rng.random_range(0.0..160.0), rng.random_range(0.0..120.0));
        let d = rng.random_range(0.2..5.0);
        let (u2, v2) = project_point(&k, &backproject_pixel(&k, u, v, d).unwrap()).unwrap();
        assert!((u - u2).abs() < 1e-9 && (v - v2).abs() < 1e-9);
    }
}

#[test]
fn intrinsics_validation() {
    assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 10, 10).is_err());
    assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 0, 10).is_err());
}
