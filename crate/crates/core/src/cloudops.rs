//! Point-cloud operations: reprojection from depth crops, farthest point
//! sampling, unit-sphere normalization, spherical coordinates and
//! training-time augmentation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{BoundingBox, CameraIntrinsics, DepthFrame, PointCloud};

/// Back-projects every nonzero crop pixel through the pinhole model.
///
/// Crop pixel `(i, j)` maps to frame pixel `(box.u_min + i, box.v_min + j)`.
/// Points are emitted in row-major pixel order and remember their pixel.
pub fn unproject(
    crop: &DepthFrame,
    bbox: &BoundingBox,
    intrinsics: &CameraIntrinsics,
) -> Result<PointCloud> {
    if intrinsics.fx <= 0.0 || intrinsics.fy <= 0.0 {
        return Err(Error::InvalidParam("focal lengths must be positive".into()));
    }
    let mut points = Vec::with_capacity(crop.valid_count());
    let mut pixels = Vec::with_capacity(points.capacity());
    for j in 0..crop.height() {
        for i in 0..crop.width() {
            let d = crop.get(i, j);
            if d == 0 {
                continue;
            }
            let (u, v) = (bbox.u_min + i, bbox.v_min + j);
            let z = f64::from(d) / 1000.0;
            let x = (u as f64 - intrinsics.cx) * z / intrinsics.fx;
            let y = (v as f64 - intrinsics.cy) * z / intrinsics.fy;
            points.push([x, y, z]);
            pixels.push((u as u32, v as u32));
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(PointCloud {
        points,
        label: None,
        sequence_id: crop.sequence_id.clone(),
        frame_index: crop.frame_index,
        pixels: Some(pixels),
    })
}

/// Where farthest point sampling begins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StartRule {
    /// The point with the lexicographically smallest `(x, y, z)`,
    /// lowest index on exact ties.
    #[default]
    Lexicographic,
    Index(usize),
}

impl StartRule {
    fn resolve(self, points: &[[f64; 3]]) -> Result<usize> {
        match self {
            StartRule::Index(i) if i < points.len() => Ok(i),
            StartRule::Index(i) => Err(Error::InvalidParam(format!(
                "start index {i} out of range for {} points",
                points.len()
            ))),
            StartRule::Lexicographic => Ok((0..points.len())
                .min_by(|&a, &b| {
                    points[a]
                        .partial_cmp(&points[b])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(&b))
                })
                .unwrap_or(0)),
        }
    }
}

/// Indices chosen by greedy farthest point sampling, in selection order.
pub fn farthest_point_indices(points: &[[f64; 3]], k: usize, start: StartRule) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(Error::SampleCountOutOfRange {
            k,
            available: points.len(),
        });
    }
    let first = start.resolve(points)?;
    let mut selected = Vec::with_capacity(k);
    selected.push(first);
    // Coordinate columns keep the update loop vectorizable.
    let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = points.iter().map(|p| p[1]).collect();
    let zs: Vec<f64> = points.iter().map(|p| p[2]).collect();
    // Selected points hold -inf, which `min` never raises.
    let mut nearest = vec![f64::INFINITY; points.len()];
    let mut chosen = first;
    while selected.len() < k {
        let c = points[chosen];
        nearest[chosen] = f64::NEG_INFINITY;
        const LANES: usize = 8;
        let mut lanes = [f64::NEG_INFINITY; LANES];
        let update = |n: &mut [f64], x: &[f64], y: &[f64], z: &[f64], lanes: &mut [f64]| {
            for j in 0..n.len() {
                let d = (x[j] - c[0]) * (x[j] - c[0]) + (y[j] - c[1]) * (y[j] - c[1]) + (z[j] - c[2]) * (z[j] - c[2]);
                let v = if d < n[j] { d } else { n[j] };
                n[j] = v;
                lanes[j] = if v > lanes[j] { v } else { lanes[j] };
            }
        };
        let full = points.len() / LANES * LANES;
        for (((n, x), y), z) in nearest[..full]
            .chunks_exact_mut(LANES)
            .zip(xs.chunks_exact(LANES))
            .zip(ys.chunks_exact(LANES))
            .zip(zs.chunks_exact(LANES))
        {
            update(n, x, y, z, &mut lanes);
        }
        update(&mut nearest[full..], &xs[full..], &ys[full..], &zs[full..], &mut lanes);
        let top = lanes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // First occurrence keeps the lowest index among equal distances.
        let best = nearest.iter().position(|&d| d == top).expect("k <= point count");
        selected.push(best);
        chosen = best;
    }
    Ok(selected)
}

/// Greedy farthest point sampling down to `k` points.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize, start: StartRule) -> Result<PointCloud> {
    let idx = farthest_point_indices(&cloud.points, k, start)?;
    Ok(cloud.select(&idx))
}

/// Centers on the centroid and scales the farthest point to unit norm.
pub fn normalize_cloud(cloud: &PointCloud) -> PointCloud {
    let c = cloud.centroid();
    let centered: Vec<[f64; 3]> = cloud
        .points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let max_norm = centered
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0f64, f64::max);
    let scale = if max_norm > 0.0 { max_norm } else { 1.0 };
    let mut out = cloud.clone();
    out.points = centered
        .into_iter()
        .map(|p| [p[0] / scale, p[1] / scale, p[2] / scale])
        .collect();
    out
}

/// Centroid-centered spherical coordinates: radius, polar angle from +z,
/// and azimuth in the x-y plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalCloud {
    pub center: [f64; 3],
    /// `(r, polar, azimuth)` per point.
    pub coords: Vec<(f64, f64, f64)>,
}

impl SphericalCloud {
    pub fn to_cartesian(&self) -> Vec<[f64; 3]> {
        let c = self.center;
        self.coords
            .iter()
            .map(|&(r, polar, azimuth)| {
                let (sp, cp) = polar.sin_cos();
                let (sa, ca) = azimuth.sin_cos();
                [c[0] + r * sp * ca, c[1] + r * sp * sa, c[2] + r * cp]
            })
            .collect()
    }

    pub fn radii(&self) -> impl Iterator<Item = f64> + '_ {
        self.coords.iter().map(|c| c.0)
    }
}

pub fn to_spherical(cloud: &PointCloud) -> SphericalCloud {
    let center = cloud.centroid();
    let coords = cloud
        .points
        .iter()
        .map(|p| {
            let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let polar = if r > 0.0 { (d[2] / r).clamp(-1.0, 1.0).acos() } else { 0.0 };
            let azimuth = d[1].atan2(d[0]);
            (r, polar, azimuth)
        })
        .collect();
    SphericalCloud { center, coords }
}

/// Rotates every point by `angle` radians about the z axis.
pub fn rotate_z(cloud: &PointCloud, angle: f64) -> PointCloud {
    let (s, c) = angle.sin_cos();
    let mut out = cloud.clone();
    for p in &mut out.points {
        let (x, y) = (p[0], p[1]);
        p[0] = c * x - s * y;
        p[1] = s * x + c * y;
    }
    out
}

/// Random z-rotation followed by i.i.d. Gaussian jitter of std `sigma` meters.
pub fn augment_cloud<R: Rng + ?Sized>(cloud: &PointCloud, rng: &mut R, sigma: f64) -> PointCloud {
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    augment_with_angle(cloud, rng, sigma, angle)
}

/// [`augment_cloud`] with the rotation angle fixed by the caller.
pub fn augment_with_angle<R: Rng + ?Sized>(
    cloud: &PointCloud,
    rng: &mut R,
    sigma: f64,
    angle: f64,
) -> PointCloud {
    let mut out = rotate_z(cloud, angle);
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("sigma is finite and positive");
        for p in &mut out.points {
            for c in p.iter_mut() {
                *c += noise.sample(rng);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(1.5..3.5),
                    ]
                })
                .collect(),
        )
    }

    /// Straight-from-the-definition FPS: recompute every candidate's
    /// distance to the selected set on each round.
    fn brute_force_fps(points: &[[f64; 3]], k: usize, start: usize) -> Vec<usize> {
        let dist = |a: &[f64; 3], b: &[f64; 3]| {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        };
        let mut selected = vec![start];
        while selected.len() < k {
            let mut best: Option<(usize, f64)> = None;
            for i in 0..points.len() {
                if selected.contains(&i) {
                    continue;
                }
                let d = selected
                    .iter()
                    .map(|&s| dist(&points[i], &points[s]))
                    .fold(f64::INFINITY, f64::min);
                if best.is_none_or(|(_, bd)| d > bd) {
                    best = Some((i, d));
                }
            }
            selected.push(best.unwrap().0);
        }
        selected
    }

    #[test]
    fn principal_point_maps_to_optical_axis() {
        let k = CameraIntrinsics {
            fx: 100.0,
            fy: 120.0,
            cx: 50.0,
            cy: 40.0,
        };
        let mut crop = DepthFrame::zeros(1, 1);
        crop.set(0, 0, 2000);
        let bbox = BoundingBox {
            u_min: 50,
            v_min: 40,
            u_max: 51,
            v_max: 41,
            area: 1,
        };
        assert_eq!(unproject(&crop, &bbox, &k).unwrap().points, vec![[0.0, 0.0, 2.0]]);

        let bbox = BoundingBox {
            u_min: 150,
            u_max: 151,
            ..bbox
        };
        assert_eq!(unproject(&crop, &bbox, &k).unwrap().points[0][0], 2.0);
    }

    #[test]
    fn empty_crop_is_an_error() {
        let crop = DepthFrame::zeros(3, 3);
        let r = unproject(&crop, &BoundingBox::whole(&crop), &CameraIntrinsics::kinect_v2());
        assert!(matches!(r, Err(Error::EmptyCloud)));
    }

    #[test]
    fn unproject_then_project_recovers_pixels() {
        let k = CameraIntrinsics::kinect_v2();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut crop = DepthFrame::zeros(40, 30);
        for d in crop.data_mut() {
            *d = if rng.random_bool(0.2) { 0 } else { rng.random_range(500..8000) };
        }
        let bbox = BoundingBox {
            u_min: 200,
            v_min: 150,
            u_max: 240,
            v_max: 180,
            area: 1,
        };
        let cloud = unproject(&crop, &bbox, &k).unwrap();
        let pixels = cloud.pixels.as_ref().unwrap();
        for (p, &(u, v)) in cloud.points.iter().zip(pixels) {
            let (pu, pv, z) = k.project(*p);
            assert!((pu - u as f64).abs() < 1e-6 && (pv - v as f64).abs() < 1e-6);
            let i = u as usize - bbox.u_min;
            let j = v as usize - bbox.v_min;
            assert_eq!(z, f64::from(crop.get(i, j)) / 1000.0);
        }
    }

    #[test]
    fn fps_full_count_and_square() {
        let c = random_cloud(1, 20);
        let all = farthest_point_sample(&c, 20, StartRule::default()).unwrap();
        let mut a = all.points.clone();
        let mut b = c.points.clone();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(a, b);

        let square = PointCloud::new(vec![
            [0.5, 0.5, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ]);
        let two = farthest_point_sample(&square, 2, StartRule::default()).unwrap();
        assert_eq!(two.points, vec![[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]]);
    }

    #[test]
    fn fps_rejects_bad_k() {
        let c = random_cloud(1, 5);
        assert!(farthest_point_sample(&c, 0, StartRule::default()).is_err());
        assert!(farthest_point_sample(&c, 6, StartRule::default()).is_err());
    }

    #[test]
    fn fps_matches_brute_force() {
        for seed in 0..20 {
            let c = random_cloud(seed, 128);
            let start = StartRule::Lexicographic.resolve(&c.points).unwrap();
            let fast = farthest_point_indices(&c.points, 16, StartRule::default()).unwrap();
            assert_eq!(fast, brute_force_fps(&c.points, 16, start), "seed {seed}");
        }
    }

    #[test]
    fn fps_handles_duplicates() {
        let c = PointCloud::new(vec![[0.0; 3], [0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let idx = farthest_point_indices(&c.points, 4, StartRule::default()).unwrap();
        assert_eq!(idx, vec![0, 2, 1, 3]);
    }

    #[test]
    fn normalization_examples() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [0.0, 0.0, 2.0]]);
        assert_eq!(normalize_cloud(&c).points, vec![[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]]);

        let single = PointCloud::new(vec![[3.0, 4.0, 5.0]]);
        assert_eq!(normalize_cloud(&single).points, vec![[0.0; 3]]);

        for seed in 0..10 {
            let n = normalize_cloud(&random_cloud(seed, 64));
            let c = n.centroid();
            assert!((c[0].powi(2) + c[1].powi(2) + c[2].powi(2)).sqrt() < 1e-9);
            let max = n
                .points
                .iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
                .fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-9);
            let again = normalize_cloud(&n);
            for (a, b) in again.points.iter().zip(&n.points) {
                for j in 0..3 {
                    assert!((a[j] - b[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn spherical_examples_and_round_trip() {
        let c = PointCloud::new(vec![[0.0, 0.0, -1.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]]);
        let s = to_spherical(&c);
        assert_eq!(s.center, [0.0; 3]);
        assert_eq!(s.coords[1].0, 1.0);
        assert_eq!(s.coords[1].1, 0.0);
        assert_eq!(s.coords[2].0, 0.0);

        for seed in 0..10 {
            let cloud = random_cloud(seed, 200);
            let back = to_spherical(&cloud).to_cartesian();
            for (a, b) in back.iter().zip(&cloud.points) {
                for j in 0..3 {
                    assert!((a[j] - b[j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rotation_examples() {
        let c = random_cloud(3, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_with_angle(&c, &mut rng, 0.0, 0.0).points, c.points);

        let flipped = augment_with_angle(&c, &mut rng, 0.0, std::f64::consts::PI);
        for (a, b) in flipped.points.iter().zip(&c.points) {
            assert!((a[0] + b[0]).abs() < 1e-12 && (a[1] + b[1]).abs() < 1e-12);
            assert_eq!(a[2], b[2]);
        }
    }

    fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
    }

    #[test]
    fn rotation_preserves_pairwise_distances() {
        let c = random_cloud(8, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = augment_cloud(&c, &mut rng, 0.0);
        for i in 0..c.len() {
            for j in 0..c.len() {
                let d0 = dist2(&c.points[i], &c.points[j]).sqrt();
                let d1 = dist2(&r.points[i], &r.points[j]).sqrt();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn jitter_has_requested_spread() {
        let c = random_cloud(11, 4096);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let angle = 0.3;
        let jittered = augment_with_angle(&c, &mut rng, 0.02, angle);
        let rotated = rotate_z(&c, angle);
        let d: Vec<f64> = jittered
            .points
            .iter()
            .zip(&rotated.points)
            .flat_map(|(a, b)| (0..3).map(move |j| a[j] - b[j]))
            .collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        let std = var.sqrt();
        assert!((0.015..=0.025).contains(&std), "std {std}");
    }

    #[test]
    fn augmentation_is_seeded() {
        let c = random_cloud(2, 30);
        let a = augment_cloud(&c, &mut ChaCha8Rng::seed_from_u64(4), 0.02);
        let b = augment_cloud(&c, &mut ChaCha8Rng::seed_from_u64(4), 0.02);
        assert_eq!(a, b);
    }
}
