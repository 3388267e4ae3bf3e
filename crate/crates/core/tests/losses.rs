use i2p_core::features::{Carrier, FeatureField};
use i2p_core::geometry::{NormalField, Vec3};
use i2p_core::losses::{
    circle_exponents, circle_loss, gdc_loss, gdc_loss_raw, log_sum_exp, mmd, mmd_median, normal_consistency_loss,
    normal_consistency_raw, self_similarity, total_loss, warmup_weight, CircleLossConfig, LossWeights, PairScale,
    WarmupSchedule,
};
use i2p_core::Error;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn unit_rows(rng: &mut ChaCha8Rng, m: usize, c: usize) -> DMatrix<f64> {
    let mut f = DMatrix::from_fn(m, c, |_, _| rng.random_range(-1.0..1.0));
    for mut row in f.row_iter_mut() {
        let n = row.norm();
        row /= n;
    }
    f
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[test]
fn normal_consistency_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n: Vec<Vec3> = (0..10).map(|_| random_unit(&mut rng)).collect();
    let a = NormalField::from_points(n.clone()).unwrap();
    let flipped = NormalField::from_points(n.iter().map(|v| -v).collect()).unwrap();
    assert!(normal_consistency_loss(&a, &a).unwrap().0.abs() < 1e-12);
    assert!((normal_consistency_loss(&a, &flipped).unwrap().0 - 2.0).abs() < 1e-12);

    let none = NormalField::new(10, 1, n.clone(), vec![false; 10]).unwrap();
    assert!(matches!(normal_consistency_loss(&a, &none), Err(Error::EmptyOverlap)));
}

#[test]
fn normal_consistency_masks_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let m = rng.random_range(1..40);
        let p: Vec<Vec3> = (0..m).map(|_| random_unit(&mut rng)).collect();
        let t: Vec<Vec3> = (0..m).map(|_| random_unit(&mut rng)).collect();
        let vp: Vec<bool> = (0..m).map(|_| rng.random_bool(0.8)).collect();
        let vt: Vec<bool> = (0..m).map(|_| rng.random_bool(0.8)).collect();
        let pf = NormalField::new(m, 1, p.clone(), vp.clone()).unwrap();
        let tf = NormalField::new(m, 1, t.clone(), vt.clone()).unwrap();
        let joint: Vec<usize> = (0..m).filter(|&i| vp[i] && vt[i]).collect();
        let res = normal_consistency_loss(&pf, &tf);
        if joint.is_empty() {
            assert!(res.is_err());
            continue;
        }
        let (loss, grad) = res.unwrap();
        let mut s = 0.0;
        for &i in &joint {
            s += p[i].x * t[i].x + p[i].y * t[i].y + p[i].z * t[i].z;
        }
        assert!((loss - (1.0 - s / joint.len() as f64)).abs() < 1e-12);
        for (i, g) in grad.iter().enumerate().take(m) {
            if !joint.contains(&i) {
                assert_eq!(*g, Vec3::zeros());
            }
        }
    }
}

#[test]
fn normal_consistency_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let m = 1 + trial;
        let p: Vec<Vec3> = (0..m).map(|_| random_unit(&mut rng)).collect();
        let t: Vec<Vec3> = (0..m).map(|_| random_unit(&mut rng)).collect();
        let (_, grad) = normal_consistency_loss(
            &NormalField::from_points(p.clone()).unwrap(),
            &NormalField::from_points(t.clone()).unwrap(),
        )
        .unwrap();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in 0..m {
            for c in 0..3 {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus[i][c] += STEP;
                minus[i][c] -= STEP;
                let fd = (normal_consistency_raw(&plus, &t).unwrap() - normal_consistency_raw(&minus, &t).unwrap())
                    / (2.0 * STEP);
                analytic.push(grad[i][c]);
                numeric.push(fd);
            }
        }
        assert!(rel_err(&analytic, &numeric) < 1e-4);
    }
}

#[test]
fn self_similarity_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = unit_rows(&mut rng, 6, 4);
    let s = self_similarity(&FeatureField::new(f.clone(), Carrier::Image).unwrap()).unwrap();
    for i in 0..6 {
        assert!((s[(i, i)] - 1.0).abs() < 1e-9);
        for j in 0..6 {
            let dot: f64 = (0..4).map(|c| f[(i, c)] * f[(j, c)]).sum();
            assert!((s[(i, j)] - dot).abs() < 1e-12);
            assert_eq!(s[(i, j)], s[(j, i)]);
        }
    }
    let bad = FeatureField::new(f * 2.0, Carrier::Image).unwrap();
    assert!(matches!(self_similarity(&bad), Err(Error::NotNormalized { .. })));
}

#[test]
fn gdc_anchor_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = FeatureField::new(unit_rows(&mut rng, 7, 5), Carrier::Image).unwrap();
    let g = FeatureField::new(f.matrix().clone(), Carrier::Cloud).unwrap();
    let same = gdc_loss(&f, &g).unwrap();
    assert_eq!(same.value, 0.0);
    assert!(same.grad_image.iter().all(|x| *x == 0.0));
    assert!(same.grad_cloud.iter().all(|x| *x == 0.0));

    let img = FeatureField::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]), Carrier::Image).unwrap();
    let cloud = FeatureField::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]), Carrier::Cloud).unwrap();
    let value = gdc_loss(&img, &cloud).unwrap().value;
    // entry-wise oracle
    let si = [[1.0, 0.0], [0.0, 1.0]];
    let sp = [[1.0, 1.0], [1.0, 1.0]];
    let mut oracle = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let d: f64 = si[i][j] - sp[i][j];
            oracle += d * d;
        }
    }
    assert_eq!(oracle, 2.0);
    assert_eq!(value, 2.0);

    let wide = FeatureField::new(DMatrix::from_element(3, 2, 0.5f64.sqrt()), Carrier::Cloud).unwrap();
    assert!(matches!(gdc_loss(&img, &wide), Err(Error::ShapeMismatch(_))));
}

#[test]
fn gdc_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..24 {
        let m = 2 + trial % 31;
        let c = 2 + (trial * 7) % 31;
        let a = unit_rows(&mut rng, m, c);
        let b = unit_rows(&mut rng, m, c);
        let g = gdc_loss_raw(&a, &b);
        for (which, grad) in [(0, &g.grad_image), (1, &g.grad_cloud)] {
            let mut analytic = Vec::new();
            let mut numeric = Vec::new();
            // sample up to 40 coordinates per matrix
            for _ in 0..40 {
                let (i, j) = (rng.random_range(0..m), rng.random_range(0..c));
                let eval = |delta: f64| {
                    let (mut x, mut y) = (a.clone(), b.clone());
                    if which == 0 {
                        x[(i, j)] += delta;
                    } else {
                        y[(i, j)] += delta;
                    }
                    gdc_loss_raw(&x, &y).value
                };
                analytic.push(grad[(i, j)]);
                numeric.push((eval(STEP) - eval(-STEP)) / (2.0 * STEP));
            }
            assert!(rel_err(&analytic, &numeric) < 1e-4, "trial {trial}");
        }
    }
}

#[test]
fn gdc_tangent_directional_derivative() {
    // perturb along the unit sphere of each row and compare with the
    // gradient projected onto that tangent direction
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let (m, c) = (rng.random_range(2..32), rng.random_range(2..32));
        let a = unit_rows(&mut rng, m, c);
        let b = unit_rows(&mut rng, m, c);
        let mut dir = DMatrix::from_fn(m, c, |_, _| rng.random_range(-1.0..1.0));
        for i in 0..m {
            let proj = dir.row(i).dot(&a.row(i));
            let ai = a.row(i).into_owned();
            let mut r = dir.row_mut(i);
            r -= ai * proj;
        }
        let retract = |t: f64| {
            let mut x = &a + &dir * t;
            for mut row in x.row_iter_mut() {
                let n = row.norm();
                row /= n;
            }
            let fx = FeatureField::new(x, Carrier::Image).unwrap();
            let fy = FeatureField::new(b.clone(), Carrier::Cloud).unwrap();
            gdc_loss(&fx, &fy).unwrap().value
        };
        let fd = (retract(STEP) - retract(-STEP)) / (2.0 * STEP);
        let analytic = gdc_loss_raw(&a, &b).grad_image.dot(&dir);
        assert!(rel_err(&[analytic], &[fd]) < 1e-4);
    }
}

#[test]
fn gdc_orthogonal_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = unit_rows(&mut rng, 6, 5);
    let b = unit_rows(&mut rng, 6, 5);
    let q = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0)).qr().q();
    let base = gdc_loss_raw(&a, &b).value;
    let turned = gdc_loss_raw(&(&a * q.transpose()), &(&b * q.transpose())).value;
    assert!((base - turned).abs() < 1e-12);
}

fn naive_circle(pos: &[f64], neg: &[f64], cfg: &CircleLossConfig) -> f64 {
    let (ep, en) = circle_exponents(pos, neg, cfg).unwrap();
    let sp: f64 = ep.iter().map(|e| e.exp()).sum();
    let sn: f64 = en.iter().map(|e| e.exp()).sum();
    (1.0 + sp * sn).ln() / cfg.gamma
}

#[test]
fn circle_anchor_values() {
    let cfg = CircleLossConfig::default();
    assert_eq!(circle_loss(&[], &[0.3], &cfg).unwrap(), 0.0);
    assert_eq!(circle_loss(&[0.3], &[], &cfg).unwrap(), 0.0);
    let v = circle_loss(&[0.1], &[1.4], &cfg).unwrap();
    assert!((v - 2f64.ln() / 24.0).abs() < 1e-15);
}

#[test]
fn circle_lse_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = CircleLossConfig::default();
    let mut compared = 0;
    for _ in 0..500 {
        let pos: Vec<f64> = (0..rng.random_range(1..8)).map(|_| rng.random_range(0.0..1.5)).collect();
        let neg: Vec<f64> = (0..rng.random_range(1..8)).map(|_| rng.random_range(0.0..2.0)).collect();
        let naive = naive_circle(&pos, &neg, &cfg);
        if naive.is_finite() {
            compared += 1;
            assert!((circle_loss(&pos, &neg, &cfg).unwrap() - naive).abs() < 1e-9);
        }
    }
    assert!(compared > 400);
}

#[test]
fn circle_stays_finite_where_naive_overflows() {
    let cfg = CircleLossConfig::default();
    let pos = [40.0];
    let neg = [0.0];
    assert!(!naive_circle(&pos, &neg, &cfg).is_finite());
    let v = circle_loss(&pos, &neg, &cfg).unwrap();
    assert!(v.is_finite() && v > 0.0);
}

#[test]
fn circle_per_pair_scales() {
    let cfg = CircleLossConfig {
        lambda_p: PairScale::PerPair(vec![1.0, 2.0]),
        ..CircleLossConfig::default()
    };
    assert!(circle_loss(&[0.5, 0.6], &[0.2], &cfg).is_ok());
    assert!(circle_loss(&[0.5], &[0.2], &cfg).is_err());
    let bad = CircleLossConfig {
        delta_p: 2.0,
        ..CircleLossConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn total_loss_examples() {
    let w = LossWeights::default();
    assert_eq!(total_loss(2.0, 1.0, 4.0, &w), 5.0);
    let zero = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
    };
    assert_eq!(total_loss(2.0, 1.0, 4.0, &zero), 0.0);
    let only = LossWeights {
        lambda1: 0.0,
        lambda2: 1.0,
        lambda3: 0.0,
    };
    assert_eq!(total_loss(2.0, 1.5, 4.0, &only), 1.5);
}

#[test]
fn warmup_examples() {
    let s = WarmupSchedule::new(10, 20).unwrap();
    assert_eq!(warmup_weight(5, &s), 0.0);
    assert_eq!(warmup_weight(15, &s), 0.5);
    assert_eq!(warmup_weight(25, &s), 1.0);
    assert_eq!(warmup_weight(10, &s), 0.0);
    assert_eq!(warmup_weight(20, &s), 1.0);
    let step = WarmupSchedule::new(12, 12).unwrap();
    assert_eq!(warmup_weight(11, &step), 0.0);
    assert_eq!(warmup_weight(12, &step), 1.0);
    assert!(WarmupSchedule::new(5, 4).is_err());
}

#[test]
fn mmd_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = FeatureField::new(DMatrix::from_fn(12, 4, |_, _| rng.random_range(-1.0..1.0)), Carrier::Image).unwrap();
    assert!(mmd(&a, &a, 0.7).unwrap().abs() < 1e-12);
    assert!(mmd_median(&a, &a).unwrap().abs() < 1e-12);

    let x = FeatureField::new(DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 2.0]), Carrier::Image).unwrap();
    let y = FeatureField::new(DMatrix::from_row_slice(1, 3, &[1.0, -1.0, 0.5]), Carrier::Cloud).unwrap();
    let sigma = 1.3;
    let d2: f64 = 1.0 + 4.0 + 2.25;
    let expected = 2.0 * (1.0 - (-d2 / (2.0 * sigma * sigma)).exp());
    assert!((mmd(&x, &y, sigma).unwrap() - expected).abs() < 1e-12);

    let empty = FeatureField::new(DMatrix::zeros(0, 3), Carrier::Image).unwrap();
    assert!(matches!(mmd(&empty, &y, 1.0), Err(Error::EmptySample)));
}

#[test]
fn mmd_grows_with_separation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let base = DMatrix::from_fn(20, 3, |_, _| rng.random_range(-0.5..0.5));
    let other = DMatrix::from_fn(20, 3, |_, _| rng.random_range(-0.5..0.5));
    let a = FeatureField::new(base, Carrier::Image).unwrap();
    let mut last = -1.0;
    for step in 0..10 {
        let shifted = other.map(|v| v) + DMatrix::from_element(20, 3, step as f64 * 0.2);
        let b = FeatureField::new(shifted, Carrier::Cloud).unwrap();
        let v = mmd(&a, &b, 1.0).unwrap();
        assert!(v > last, "step {step}: {v} <= {last}");
        last = v;
    }
}

#[test]
fn log_sum_exp_edge_cases() {
    assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
}
