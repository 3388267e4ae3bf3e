//! Surface normals for both modalities: covariance-based normals for point
//! clouds and finite-difference normals for depth maps.

use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, NormalField, PointCloud, Vec3};
use crate::knn::KdTree;

/// Relative eigenvalue gap below which the normal direction is undefined.
pub const DEGENERACY_GAP: f64 = 1e-12;

/// Neighbour count used for sparse points by [`adaptive_neighborhood_sizes`].
pub const SPARSE_NEIGHBORHOOD: usize = 12;

/// Smallest-eigenvalue direction of a neighbourhood covariance, or `None`
/// when the two smallest eigenvalues coincide.
pub fn covariance_normal(neighbors: &[Vec3]) -> Option<Vec3> {
    if neighbors.is_empty() {
        return None;
    }
    let k = neighbors.len() as f64;
    let centroid = neighbors.iter().fold(Vec3::zeros(), |acc, p| acc + p) / k;
    let mut cov = Matrix3::zeros();
    for p in neighbors {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= k;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let [l0, l1, l2] = order.map(|i| eig.eigenvalues[i]);
    if l1 - l0 <= DEGENERACY_GAP * l2.abs().max(f64::MIN_POSITIVE) {
        return None;
    }
    let n = eig.eigenvectors.column(order[0]).into_owned();
    let norm = n.norm();
    (norm > 0.0 && norm.is_finite()).then(|| n / norm)
}

/// Orients `n` towards the camera at the origin as seen from `p`.
/// Points whose normal is perpendicular to the viewing ray fall back to a
/// positive largest-magnitude component.
pub fn orient_towards_origin(n: Vec3, p: &Vec3) -> Vec3 {
    let facing = -n.dot(p);
    if facing > 1e-12 * p.norm() {
        n
    } else if facing < -1e-12 * p.norm() {
        -n
    } else {
        let i = n.iamax();
        if n[i] < 0.0 {
            -n
        } else {
            n
        }
    }
}

/// Covariance normals over the `k` nearest other points.
/// Points whose neighbourhood is degenerate are marked invalid.
pub fn estimate_point_normals(cloud: &PointCloud, k: usize) -> Result<NormalField> {
    estimate_point_normals_varying(cloud, &vec![k; cloud.len()])
}

/// Covariance normals with one neighbourhood size per point.
pub fn estimate_point_normals_varying(cloud: &PointCloud, ks: &[usize]) -> Result<NormalField> {
    if ks.len() != cloud.len() {
        return Err(Error::DimensionMismatch {
            expected: cloud.len(),
            got: ks.len(),
        });
    }
    let k_max = ks.iter().copied().max().unwrap_or(0);
    if let Some(&k) = ks.iter().find(|&&k| k < 3) {
        return Err(Error::InvalidArgument(format!("neighbour count {k} < 3")));
    }
    if cloud.len() < k_max + 1 {
        return Err(Error::InvalidArgument(format!(
            "cloud has {} points, need at least {}",
            cloud.len(),
            k_max + 1
        )));
    }
    let pts: Vec<[f64; 3]> = cloud.points().iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree = KdTree::new(&pts);
    let mut normals = Vec::with_capacity(cloud.len());
    let mut valid = Vec::with_capacity(cloud.len());
    let mut neighbors = Vec::with_capacity(k_max);
    for (i, p) in cloud.points().iter().enumerate() {
        neighbors.clear();
        neighbors.extend(
            tree.nearest(&pts[i], ks[i], Some(i))
                .into_iter()
                .map(|(j, _)| cloud.points()[j]),
        );
        match covariance_normal(&neighbors) {
            Some(n) => {
                normals.push(orient_towards_origin(n, p));
                valid.push(true);
            }
            None => {
                normals.push(Vec3::zeros());
                valid.push(false);
            }
        }
    }
    NormalField::new(cloud.len(), 1, normals, valid)
}

/// Mean distance from each point to its `k0` nearest neighbours.
pub fn neighborhood_scales(cloud: &PointCloud, k0: usize) -> Vec<f64> {
    let pts: Vec<[f64; 3]> = cloud.points().iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree = KdTree::new(&pts);
    pts.iter()
        .enumerate()
        .map(|(i, q)| {
            let nn = tree.nearest(q, k0, Some(i));
            if nn.is_empty() {
                0.0
            } else {
                nn.iter().map(|(_, d2)| d2.sqrt()).sum::<f64>() / k0 as f64
            }
        })
        .collect()
}

/// Density-aware neighbourhood sizes: points whose mean neighbour distance
/// exceeds the cloud-wide mean get [`SPARSE_NEIGHBORHOOD`], others keep `k0`.
///
/// The comparison ignores relative differences below 1e-12 so that
/// configurations with equal scales (up to rounding) all keep `k0`.
pub fn adaptive_neighborhood_sizes(cloud: &PointCloud, k0: usize) -> Result<Vec<usize>> {
    if k0 == 0 {
        return Err(Error::InvalidArgument("k0 must be at least 1".into()));
    }
    let rho = neighborhood_scales(cloud, k0);
    let mean = rho.iter().sum::<f64>() / rho.len() as f64;
    let threshold = mean + 1e-12 * mean.abs();
    Ok(rho
        .iter()
        .map(|&r| if r > threshold { SPARSE_NEIGHBORHOOD } else { k0 })
        .collect())
}

/// Finite-difference normals of a depth map, using unit pixel spacing and
/// undivided central differences. `u` indexes columns and `v` rows.
///
/// A pixel gets a normal only when it and its four axis neighbours are valid;
/// the one-pixel image border is always invalid.
pub fn depth_to_normals(depth: &DepthMap) -> NormalField {
    let (w, h) = (depth.width(), depth.height());
    let mut normals = vec![Vec3::zeros(); w * h];
    let mut valid = vec![false; w * h];
    for v in 1..h.saturating_sub(1) {
        for u in 1..w.saturating_sub(1) {
            let (Some(_), Some(right), Some(left), Some(down), Some(up)) = (
                depth.get(u, v),
                depth.get(u + 1, v),
                depth.get(u - 1, v),
                depth.get(u, v + 1),
                depth.get(u, v - 1),
            ) else {
                continue;
            };
            let g_u = right - left;
            let g_v = down - up;
            let n = Vec3::new(-g_u, -g_v, 1.0);
            let i = v * w + u;
            normals[i] = n / n.norm();
            valid[i] = true;
        }
    }
    NormalField::new(w, h, normals, valid).expect("normals are unit by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plane_normals_are_axis_aligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = (0..100)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0))
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let field = estimate_point_normals(&cloud, 8).unwrap();
        for n in field.normals() {
            assert!(n.z.abs() >= 1.0 - 1e-9);
        }
    }

    #[test]
    fn collinear_neighbourhoods_are_invalid() {
        let pts = (0..4).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 1.0)).collect();
        let cloud = PointCloud::new(pts).unwrap();
        let field = estimate_point_normals(&cloud, 3).unwrap();
        assert_eq!(field.valid_count(), 0);
    }

    #[test]
    fn precondition_errors() {
        let cloud = PointCloud::new(vec![Vec3::zeros(); 4]).unwrap();
        assert!(estimate_point_normals(&cloud, 2).is_err());
        assert!(estimate_point_normals(&cloud, 4).is_err());
    }

    #[test]
    fn normals_face_the_origin() {
        let pts = (0..50)
            .map(|i| Vec3::new((i % 7) as f64 * 0.1, (i / 7) as f64 * 0.1, 2.0 + 0.01 * (i % 3) as f64))
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let field = estimate_point_normals(&cloud, 8).unwrap();
        for (n, p) in field.normals().iter().zip(cloud.points()) {
            assert!(n.dot(&(-p)) >= 0.0);
        }
    }

    #[test]
    fn ring_keeps_base_size() {
        let pts = (0..16)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / 16.0;
                Vec3::new(a.cos(), a.sin(), 0.0)
            })
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        assert_eq!(adaptive_neighborhood_sizes(&cloud, 8).unwrap(), vec![8; 16]);
    }

    #[test]
    fn duplicated_neighbour_keeps_scales_finite() {
        let mut pts: Vec<Vec3> = (0..20).map(|i| Vec3::new(i as f64, 0.0, (i * i) as f64 * 0.01)).collect();
        pts.push(pts[3]);
        let cloud = PointCloud::new(pts).unwrap();
        let rho = neighborhood_scales(&cloud, 8);
        assert!(rho.iter().all(|r| r.is_finite()));
        let ks = adaptive_neighborhood_sizes(&cloud, 8).unwrap();
        assert!(ks.iter().all(|&k| k == 8 || k == 12));
    }

    #[test]
    fn depth_ramp() {
        let d = DepthMap::from_fn(8, 6, |u, _| 0.5 * u as f64 + 2.0);
        let field = depth_to_normals(&d);
        let expected = Vec3::new(-1.0, 0.0, 1.0) / 2f64.sqrt();
        for v in 1..5 {
            for u in 1..7 {
                let n = field.get(v * 8 + u).unwrap();
                assert!((n - expected).norm() < 1e-12);
            }
        }
        assert!(field.get(0).is_none());
    }

    #[test]
    fn masked_pixel_invalidates_neighbours() {
        let mut d = DepthMap::from_fn(7, 7, |_, _| 1.0);
        d.invalidate(3, 3);
        let field = depth_to_normals(&d);
        for (u, v) in [(3, 3), (2, 3), (4, 3), (3, 2), (3, 4)] {
            assert!(field.get(v * 7 + u).is_none(), "({u},{v})");
        }
        assert!(field.get(2 * 7 + 2).is_some());
    }
}
