//! Sequential RANSAC plane extraction from oriented point clouds: the
//! ground-truth generation route and the classical baseline the learned
//! pipeline is compared against.
//!
//! Hypotheses are single oriented points (the point fixes the offset, its
//! normal the orientation); inliers must satisfy both the distance and the
//! normal-angle gate; the best hypothesis is refit by least squares and its
//! inliers removed before the next round.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{primary_axis, GeometryError, PlaneParams};
use crate::math::{sym_eigen3, Mat3, Vec3};
use crate::par;
use crate::synth::SceneSpec;

#[derive(Debug, Error)]
pub enum RansacError {
    #[error("points and normals differ in length ({points} vs {normals})")]
    MismatchedLengths { points: usize, normals: usize },
    #[error("normal {0} is not unit length")]
    NotUnitNormal(usize),
    #[error("need at least 3 non-collinear points to fit a plane, got {0}")]
    TooFewPoints(usize),
    #[error("points are collinear or coincident; plane fit is degenerate")]
    DegenerateFit,
    #[error("PLY parse error: {0}")]
    Ply(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Points with unit surface normals.
#[derive(Clone, Debug, Default)]
pub struct OrientedPointCloud {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

impl OrientedPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), RansacError> {
        if self.points.len() != self.normals.len() {
            return Err(RansacError::MismatchedLengths {
                points: self.points.len(),
                normals: self.normals.len(),
            });
        }
        for (i, n) in self.normals.iter().enumerate() {
            if (n.norm() - 1.0).abs() > 1e-6 {
                return Err(RansacError::NotUnitNormal(i));
            }
        }
        Ok(())
    }
}

/// Extraction settings.
#[derive(Clone, Copy, Debug)]
pub struct RansacConfig {
    /// Max point-to-plane distance for inliers, scene units.
    pub inlier_distance: f64,
    /// Max angle between a point's normal and the plane normal, degrees.
    pub inlier_angle_deg: f64,
    /// Planes smaller than this are not extracted.
    pub min_inliers: usize,
    /// Hypotheses evaluated per plane.
    pub iterations: usize,
    /// Upper bound on extracted planes.
    pub max_planes: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            inlier_distance: 0.02,
            inlier_angle_deg: 15.0,
            min_inliers: 50,
            iterations: 500,
            max_planes: 32,
            seed: 0,
        }
    }
}

/// Least-squares plane through the points: the normal is the
/// smallest-eigenvalue eigenvector of the centered covariance, the center is
/// the centroid. The normal's sign follows `normal_hint` when given.
pub fn least_squares_plane(
    points: &[Vec3],
    normal_hint: Option<Vec3>,
) -> Result<PlaneParams, RansacError> {
    if points.len() < 3 {
        return Err(RansacError::TooFewPoints(points.len()));
    }
    let mut centroid = Vec3::ZERO;
    for p in points {
        centroid += *p;
    }
    centroid = centroid / points.len() as f64;
    let mut cov = Mat3::ZERO;
    for p in points {
        cov.add_outer(*p - centroid, 1.0 / points.len() as f64);
    }
    let (vals, vecs) = sym_eigen3(&cov);
    // Collinear or coincident: no unique plane (the two smallest spreads
    // both vanish relative to the largest).
    if vals[1] <= 1e-12 * vals[0].max(1e-12) {
        return Err(RansacError::DegenerateFit);
    }
    let mut normal = vecs[2];
    match normal_hint {
        Some(hint) => {
            if normal.dot(hint) < 0.0 {
                normal = -normal;
            }
        }
        None => normal = crate::math::canonical_sign(normal),
    }
    let axis = primary_axis(points, normal)?;
    Ok(PlaneParams::new(normal, -centroid.dot(normal), centroid, axis)?)
}

fn count_inliers(
    cloud: &OrientedPointCloud,
    active: &[usize],
    normal: Vec3,
    offset: f64,
    cfg: &RansacConfig,
) -> usize {
    let cos_min = cfg.inlier_angle_deg.to_radians().cos();
    active
        .iter()
        .filter(|&&i| {
            (cloud.points[i].dot(normal) + offset).abs() <= cfg.inlier_distance
                && cloud.normals[i].dot(normal) >= cos_min
        })
        .count()
}

fn collect_inliers(
    cloud: &OrientedPointCloud,
    active: &[usize],
    normal: Vec3,
    offset: f64,
    cfg: &RansacConfig,
) -> Vec<usize> {
    let cos_min = cfg.inlier_angle_deg.to_radians().cos();
    active
        .iter()
        .copied()
        .filter(|&i| {
            (cloud.points[i].dot(normal) + offset).abs() <= cfg.inlier_distance
                && cloud.normals[i].dot(normal) >= cos_min
        })
        .collect()
}

/// Sequential RANSAC: repeatedly pick the best single-point hypothesis,
/// refit it by least squares, re-collect inliers against the refit plane,
/// remove them, and continue. Returns `(plane, inlier indices)` pairs with
/// pairwise-disjoint inlier sets; every returned inlier satisfies both
/// thresholds against its refit plane. Deterministic given the seed.
pub fn extract(
    cloud: &OrientedPointCloud,
    cfg: &RansacConfig,
) -> Result<Vec<(PlaneParams, Vec<usize>)>, RansacError> {
    cloud.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut active: Vec<usize> = (0..cloud.len()).collect();
    let mut planes = Vec::new();

    while planes.len() < cfg.max_planes && active.len() >= cfg.min_inliers.max(3) {
        // Hypothesis indices are drawn sequentially so scoring order never
        // affects the stream; scoring itself is data-parallel.
        let hypotheses: Vec<usize> =
            (0..cfg.iterations).map(|_| active[rng.random_range(0..active.len())]).collect();
        let scores: Vec<usize> = par::map_slice(&hypotheses, |&h| {
            let normal = cloud.normals[h];
            let offset = -cloud.points[h].dot(normal);
            count_inliers(cloud, &active, normal, offset, cfg)
        });
        // Best count; ties go to the lowest iteration index.
        let (best_iter, &best_count) = scores
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.cmp(b).then(ib.cmp(ia)))
            .expect("at least one hypothesis");
        if best_count < cfg.min_inliers {
            break;
        }
        let h = hypotheses[best_iter];
        let hyp_normal = cloud.normals[h];
        let hyp_offset = -cloud.points[h].dot(hyp_normal);
        let hyp_inliers = collect_inliers(cloud, &active, hyp_normal, hyp_offset, cfg);

        let hint: Vec3 = hyp_inliers.iter().fold(Vec3::ZERO, |acc, &i| acc + cloud.normals[i]);
        let pts: Vec<Vec3> = hyp_inliers.iter().map(|&i| cloud.points[i]).collect();
        let refit = least_squares_plane(&pts, hint.normalized())?;

        let final_inliers = collect_inliers(cloud, &active, refit.normal, refit.offset, cfg);
        if final_inliers.len() < cfg.min_inliers {
            break;
        }
        // Refit once more over the final set so the returned parameters
        // describe exactly the returned inliers.
        let pts: Vec<Vec3> = final_inliers.iter().map(|&i| cloud.points[i]).collect();
        let hint: Vec3 = final_inliers.iter().fold(Vec3::ZERO, |acc, &i| acc + cloud.normals[i]);
        let refit = least_squares_plane(&pts, hint.normalized())?;
        let final_inliers = collect_inliers(cloud, &active, refit.normal, refit.offset, cfg);
        if final_inliers.len() < cfg.min_inliers {
            break;
        }

        let member: std::collections::BTreeSet<usize> = final_inliers.iter().copied().collect();
        active.retain(|i| !member.contains(i));
        planes.push((refit, final_inliers));
    }
    Ok(planes)
}

/// Sample an oriented point cloud from a scene's bounded planes: points
/// uniform by area (about `points_per_area` per square unit), positions
/// perturbed by isotropic Gaussian noise, normals exact.
pub fn sample_oriented_cloud(
    scene: &SceneSpec,
    points_per_area: f64,
    noise_sigma: f64,
    seed: u64,
) -> OrientedPointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("sigma >= 0");
    let mut cloud = OrientedPointCloud::default();
    for plane in &scene.planes {
        let count = (plane.shape.area() * points_per_area).round().max(3.0) as usize;
        let mut placed = 0;
        while placed < count {
            let (u, v) = match plane.shape {
                crate::synth::BoundaryShape::Rect { half_u, half_v } => (
                    rng.random_range(-half_u..half_u),
                    rng.random_range(-half_v..half_v),
                ),
                crate::synth::BoundaryShape::Disk { radius } => {
                    let u = rng.random_range(-radius..radius);
                    let v = rng.random_range(-radius..radius);
                    if u * u + v * v > radius * radius {
                        continue;
                    }
                    (u, v)
                }
            };
            let p = plane.from_uv(u, v)
                + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
            cloud.points.push(p);
            cloud.normals.push(plane.params.normal);
            placed += 1;
        }
    }
    cloud
}

/// Write an oriented cloud as ascii PLY with `x y z nx ny nz` doubles.
pub fn write_ply(path: &Path, cloud: &OrientedPointCloud) -> Result<(), RansacError> {
    cloud.validate()?;
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    writeln!(out, "element vertex {}", cloud.len()).expect("write");
    for prop in ["x", "y", "z", "nx", "ny", "nz"] {
        writeln!(out, "property double {prop}").expect("write");
    }
    out.push_str("end_header\n");
    for (p, n) in cloud.points.iter().zip(&cloud.normals) {
        writeln!(out, "{} {} {} {} {} {}", p.x, p.y, p.z, n.x, n.y, n.z).expect("write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read an ascii PLY written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<OrientedPointCloud, RansacError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(RansacError::Ply("missing magic".into()));
    }
    let mut count = None;
    for line in lines.by_ref() {
        if line == "end_header" {
            break;
        }
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = Some(
                rest.trim().parse::<usize>().map_err(|_| RansacError::Ply("bad count".into()))?,
            );
        }
    }
    let count = count.ok_or_else(|| RansacError::Ply("no vertex element".into()))?;
    let mut cloud = OrientedPointCloud::default();
    for line in lines.take(count) {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| RansacError::Ply(e.to_string()))?;
        if vals.len() != 6 {
            return Err(RansacError::Ply(format!("expected 6 fields, got {}", vals.len())));
        }
        cloud.points.push(Vec3::new(vals[0], vals[1], vals[2]));
        cloud.normals.push(Vec3::new(vals[3], vals[4], vals[5]));
    }
    if cloud.len() != count {
        return Err(RansacError::Ply(format!("expected {count} vertices, got {}", cloud.len())));
    }
    cloud.validate()?;
    Ok(cloud)
}
