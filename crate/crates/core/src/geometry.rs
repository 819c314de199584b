//! Cameras, rays, planes, and the in-plane polar parametrization.
//!
//! Conventions, used everywhere and by every file format in this crate:
//! camera frame is +z forward, x right, y down, right-handed; poses are
//! camera-to-world; pixel `(x, y)` has its center at coordinate `(x, y)`
//! exactly (so `cx`, `cy` live in `[0, width) x [0, height)`); planes satisfy
//! `P . N + d = 0` with unit normal `N`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{canonical_sign, sym_eigen3, Mat3, Vec3};

/// Dot-product threshold below which a ray is treated as parallel to a
/// plane. Below this, t exceeds any scene scale.
pub const EPS_PARALLEL: f64 = 1e-8;

/// Tolerance on plane-structure invariants (unit normal, axis orthogonality,
/// center-on-plane).
pub const PLANE_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("pixel ({x}, {y}) outside raster {width}x{height}")]
    PixelOutOfBounds { x: f64, y: f64, width: usize, height: usize },
    #[error("ray is parallel to the plane (|V.N| <= {EPS_PARALLEL})")]
    NoIntersection,
    #[error("intersection lies behind the ray origin (t = {t})")]
    BehindRay { t: f64 },
    #[error("cannot extract a primary axis from degenerate points")]
    DegenerateAxis,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid plane: {0}")]
    InvalidPlane(String),
    #[error("ray direction has zero length")]
    ZeroDirection,
    #[error("trajectory line {line}: {msg}")]
    TrajectoryParse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: Mat3::IDENTITY,
        translation: Vec3::ZERO,
    };

    /// Camera at `eye` looking at `target`, with `up` the world direction
    /// the image's -y should roughly point to (camera y is down).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Pose, GeometryError> {
        let forward = (target - eye)
            .normalized()
            .ok_or_else(|| GeometryError::InvalidCamera("eye equals target".into()))?;
        let right = forward
            .cross(up)
            .normalized()
            .ok_or_else(|| GeometryError::InvalidCamera("view direction parallel to up".into()))?;
        let down = forward.cross(right);
        Ok(Pose {
            rotation: Mat3::from_cols(right, down, forward),
            translation: eye,
        })
    }

    pub fn camera_to_world(&self, p_cam: Vec3) -> Vec3 {
        self.rotation.mul_vec(p_cam) + self.translation
    }

    pub fn world_to_camera(&self, p_world: Vec3) -> Vec3 {
        self.rotation.transpose().mul_vec(p_world - self.translation)
    }
}

/// A posed pinhole view, optionally carrying its RGB raster and depth.
///
/// `pixels` is row-major, `pixels[y * width + x]`, RGB in `[0, 1]`. An empty
/// `pixels` means the view describes pose and intrinsics only. `depth` (when
/// present) stores distance along the unit pixel ray, `+inf` for no surface.
#[derive(Clone, Debug)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
    pub depth: Option<Vec<f64>>,
}

impl CameraView {
    pub fn new(
        intrinsics: Intrinsics,
        pose: Pose,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let view = CameraView {
            intrinsics,
            pose,
            width,
            height,
            pixels: Vec::new(),
            depth: None,
        };
        view.validate()?;
        Ok(view)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let i = &self.intrinsics;
        if !(i.fx > 0.0 && i.fy > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                i.fx, i.fy
            )));
        }
        if !(0.0 <= i.cx && i.cx < self.width as f64 && 0.0 <= i.cy && i.cy < self.height as f64) {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({}, {}) outside raster {}x{}",
                i.cx, i.cy, self.width, self.height
            )));
        }
        if self.pose.rotation.orthonormality_error() > 1e-9 {
            return Err(GeometryError::InvalidCamera(
                "rotation is not orthonormal".into(),
            ));
        }
        if (self.pose.rotation.det() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidCamera(
                "rotation determinant is not +1".into(),
            ));
        }
        if !self.pixels.is_empty() && self.pixels.len() != self.width * self.height {
            return Err(GeometryError::InvalidCamera(
                "pixel buffer does not match raster size".into(),
            ));
        }
        if let Some(d) = &self.depth {
            if d.len() != self.width * self.height {
                return Err(GeometryError::InvalidCamera(
                    "depth buffer does not match raster size".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn camera_center(&self) -> Vec3 {
        self.pose.translation
    }

    /// Project a world point; `None` when it is not strictly in front of the
    /// camera. Returns pixel coordinates and camera-frame depth z.
    pub fn project(&self, p_world: Vec3) -> Option<(f64, f64, f64)> {
        let p = self.pose.world_to_camera(p_world);
        if p.z <= 0.0 {
            return None;
        }
        let px = self.intrinsics.fx * p.x / p.z + self.intrinsics.cx;
        let py = self.intrinsics.fy * p.y / p.z + self.intrinsics.cy;
        Some((px, py, p.z))
    }

    /// Nearest-pixel lookup of the RGB raster at (possibly fractional) pixel
    /// coordinates. `None` when outside the raster or when no raster is set.
    pub fn sample_nearest(&self, px: f64, py: f64) -> Option<[f64; 3]> {
        if self.pixels.is_empty() {
            return None;
        }
        let x = px.round();
        let y = py.round();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some(self.pixels[y as usize * self.width + x as usize])
    }
}

/// Unit-direction ray `P(t) = origin + t * dir`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    /// Normalizes the direction; scaling the input direction does not change
    /// the ray.
    pub fn new(origin: Vec3, dir: Vec3) -> Result<Ray, GeometryError> {
        let dir = dir.normalized().ok_or(GeometryError::ZeroDirection)?;
        Ok(Ray { origin, dir })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Plane with unit normal `N`, offset `d` (`P . N + d = 0` on the plane), a
/// center point on the plane and a unit in-plane primary axis. The axis is
/// the theta = 0 reference direction of the polar parametrization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneParams {
    pub normal: Vec3,
    pub offset: f64,
    pub center: Vec3,
    pub axis: Vec3,
}

impl PlaneParams {
    pub fn new(normal: Vec3, offset: f64, center: Vec3, axis: Vec3) -> Result<Self, GeometryError> {
        let p = PlaneParams { normal, offset, center, axis };
        p.validate()?;
        Ok(p)
    }

    /// Build from a center, normal and in-plane axis; the offset is derived
    /// as `-center . normal`.
    pub fn from_center(center: Vec3, normal: Vec3, axis: Vec3) -> Result<Self, GeometryError> {
        PlaneParams::new(normal, -center.dot(normal), center, axis)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if (self.normal.norm() - 1.0).abs() > PLANE_TOL {
            return Err(GeometryError::InvalidPlane("normal is not unit length".into()));
        }
        if (self.axis.norm() - 1.0).abs() > PLANE_TOL {
            return Err(GeometryError::InvalidPlane("axis is not unit length".into()));
        }
        if self.normal.dot(self.axis).abs() >= PLANE_TOL {
            return Err(GeometryError::InvalidPlane(
                "axis is not orthogonal to the normal".into(),
            ));
        }
        if (self.center.dot(self.normal) + self.offset).abs() >= PLANE_TOL {
            return Err(GeometryError::InvalidPlane("center does not lie on the plane".into()));
        }
        Ok(())
    }

    /// Second in-plane basis vector; `(axis, binormal, normal)` is
    /// right-handed.
    pub fn binormal(&self) -> Vec3 {
        self.normal.cross(self.axis)
    }

    /// Signed distance of a point to the plane.
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        p.dot(self.normal) + self.offset
    }

    /// Re-establish the structural invariants after the normal or offset
    /// moved (used between refinement steps): renormalize the normal, slide
    /// the center along the normal back onto the plane, re-orthogonalize the
    /// axis against the normal.
    pub fn renormalize(&mut self) -> Result<(), GeometryError> {
        self.normal = self
            .normal
            .normalized()
            .ok_or_else(|| GeometryError::InvalidPlane("normal collapsed to zero".into()))?;
        self.center = self.center - self.normal * self.signed_distance(self.center);
        self.axis = (self.axis - self.normal * self.axis.dot(self.normal))
            .normalized()
            .ok_or_else(|| GeometryError::InvalidPlane("axis collapsed onto the normal".into()))?;
        self.validate()
    }
}

/// In-plane polar coordinates relative to a plane's center and primary axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolarPoint {
    /// Distance from the plane center, >= 0.
    pub r: f64,
    /// Angle in `[0, 2*pi)` measured from the primary axis, positive toward
    /// the binormal.
    pub theta: f64,
}

/// Back-project a pixel to its world-space ray.
///
/// The coordinates may be fractional; they must lie inside the raster.
pub fn pixel_to_ray(view: &CameraView, px: f64, py: f64) -> Result<Ray, GeometryError> {
    if px < 0.0 || py < 0.0 || px >= view.width as f64 || py >= view.height as f64 {
        return Err(GeometryError::PixelOutOfBounds {
            x: px,
            y: py,
            width: view.width,
            height: view.height,
        });
    }
    let dir_cam = Vec3::new(
        (px - view.intrinsics.cx) / view.intrinsics.fx,
        (py - view.intrinsics.cy) / view.intrinsics.fy,
        1.0,
    );
    let dir_world = view.pose.rotation.mul_vec(dir_cam);
    Ray::new(view.camera_center(), dir_world)
}

/// Ray-plane intersection: `t = -(P0 . N + d) / (V . N)`, `P_i = P0 + t V`.
///
/// Fails with [`GeometryError::NoIntersection`] for (near-)parallel rays and
/// [`GeometryError::BehindRay`] when the hit is at negative t.
pub fn intersect(ray: &Ray, plane: &PlaneParams) -> Result<(f64, Vec3), GeometryError> {
    let denom = ray.dir.dot(plane.normal);
    if denom.abs() <= EPS_PARALLEL {
        return Err(GeometryError::NoIntersection);
    }
    let t = -(ray.origin.dot(plane.normal) + plane.offset) / denom;
    if t < 0.0 {
        return Err(GeometryError::BehindRay { t });
    }
    Ok((t, ray.at(t)))
}

/// First principal component of the mean-centered `points`,
/// re-orthogonalized against `normal`, sign-canonicalized.
///
/// Needs at least two distinct points; returns
/// [`GeometryError::DegenerateAxis`] otherwise.
pub fn primary_axis(points: &[Vec3], normal: Vec3) -> Result<Vec3, GeometryError> {
    if points.len() < 2 {
        return Err(GeometryError::DegenerateAxis);
    }
    let mut mean = Vec3::ZERO;
    for p in points {
        mean += *p;
    }
    mean = mean / points.len() as f64;

    let mut cov = Mat3::ZERO;
    for p in points {
        cov.add_outer(*p - mean, 1.0 / points.len() as f64);
    }

    let (vals, vecs) = sym_eigen3(&cov);
    if vals[0] < 1e-18 {
        return Err(GeometryError::DegenerateAxis);
    }
    // Largest-spread direction first; fall back to the next eigenvector if
    // it is (numerically) parallel to the normal.
    for v in vecs {
        if let Some(axis) = (v - normal * v.dot(normal)).normalized() {
            return Ok(canonical_sign(axis));
        }
    }
    Err(GeometryError::DegenerateAxis)
}

/// Polar coordinates of an on-plane point: `r = |P - center|`, theta the
/// signed in-plane angle from the primary axis, mapped to `[0, 2*pi)`.
///
/// The point is expected to satisfy the plane equation within [`PLANE_TOL`];
/// `P = center` maps to `(0, 0)` by convention.
pub fn to_polar(point: Vec3, plane: &PlaneParams) -> PolarPoint {
    debug_assert!(plane.signed_distance(point).abs() < PLANE_TOL * 10.0);
    let rel = point - plane.center;
    let r = rel.norm();
    if r < 1e-12 {
        return PolarPoint { r: 0.0, theta: 0.0 };
    }
    let x = rel.dot(plane.axis);
    let y = rel.dot(plane.binormal());
    let mut theta = y.atan2(x);
    if theta < 0.0 {
        theta += std::f64::consts::TAU;
    }
    if theta >= std::f64::consts::TAU {
        theta = 0.0;
    }
    PolarPoint { r, theta }
}

/// Inverse of [`to_polar`]: the world point at the given in-plane polar
/// coordinates.
pub fn from_polar(polar: PolarPoint, plane: &PlaneParams) -> Vec3 {
    plane.center + plane.axis * (polar.r * polar.theta.cos())
        + plane.binormal() * (polar.r * polar.theta.sin())
}

/// Serialize a camera trajectory: one camera per line,
/// `fx fy cx cy w h r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz`.
pub fn write_trajectory(path: &Path, views: &[CameraView]) -> Result<(), GeometryError> {
    let mut out = String::new();
    for v in views {
        let i = &v.intrinsics;
        let r = &v.pose.rotation.rows;
        let t = v.pose.translation;
        writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            i.fx, i.fy, i.cx, i.cy, v.width, v.height,
            r[0][0], r[0][1], r[0][2],
            r[1][0], r[1][1], r[1][2],
            r[2][0], r[2][1], r[2][2],
            t.x, t.y, t.z
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse a trajectory written by [`write_trajectory`]. The returned views
/// carry no pixel data.
pub fn read_trajectory(path: &Path) -> Result<Vec<CameraView>, GeometryError> {
    let text = std::fs::read_to_string(path)?;
    let mut views = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let nums: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| GeometryError::TrajectoryParse {
                line: idx + 1,
                msg: e.to_string(),
            })?;
        if nums.len() != 18 {
            return Err(GeometryError::TrajectoryParse {
                line: idx + 1,
                msg: format!("expected 18 fields, got {}", nums.len()),
            });
        }
        let intr = Intrinsics { fx: nums[0], fy: nums[1], cx: nums[2], cy: nums[3] };
        let (w, h) = (nums[4] as usize, nums[5] as usize);
        let rotation = Mat3 {
            rows: [
                [nums[6], nums[7], nums[8]],
                [nums[9], nums[10], nums[11]],
                [nums[12], nums[13], nums[14]],
            ],
        };
        let pose = Pose { rotation, translation: Vec3::new(nums[15], nums[16], nums[17]) };
        views.push(CameraView::new(intr, pose, w, h).map_err(|e| {
            GeometryError::TrajectoryParse { line: idx + 1, msg: e.to_string() }
        })?);
    }
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, TAU};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
        loop {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if let Some(u) = v.normalized() {
                if v.norm() > 0.1 {
                    return u;
                }
            }
        }
    }

    fn random_plane(rng: &mut ChaCha8Rng) -> PlaneParams {
        let normal = random_unit(rng);
        let center = Vec3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        let helper = random_unit(rng);
        let axis = match (helper - normal * helper.dot(normal)).normalized() {
            Some(a) => a,
            None => return random_plane(rng),
        };
        PlaneParams::from_center(center, normal, axis).unwrap()
    }

    fn simple_view() -> CameraView {
        CameraView::new(
            Intrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0 },
            Pose::IDENTITY,
            4,
            4,
        )
        .unwrap()
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let view = simple_view();
        let ray = pixel_to_ray(&view, 0.0, 0.0).unwrap();
        assert_eq!(ray.origin, Vec3::ZERO);
        assert!((ray.dir - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn ray_origin_is_camera_center() {
        let mut view = simple_view();
        view.pose.translation = Vec3::new(1.0, 2.0, 3.0);
        let ray = pixel_to_ray(&view, 0.0, 0.0).unwrap();
        assert_eq!(ray.origin, Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn out_of_bounds_pixel_is_an_error() {
        let view = simple_view();
        assert!(matches!(
            pixel_to_ray(&view, 4.0, 0.0),
            Err(GeometryError::PixelOutOfBounds { .. })
        ));
        assert!(matches!(
            pixel_to_ray(&view, -0.1, 0.0),
            Err(GeometryError::PixelOutOfBounds { .. })
        ));
    }

    /// Projection / back-projection round trip: a random world point in front
    /// of a random camera must lie on the ray of its projected pixel.
    #[test]
    fn project_backproject_round_trip() {
        let mut rng = rng(11);
        let mut checked = 0;
        while checked < 200 {
            let axis = random_unit(&mut rng);
            let rotation = Mat3::rotation_about(axis, rng.random_range(0.0..TAU));
            let pose = Pose {
                rotation,
                translation: Vec3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                ),
            };
            let view = CameraView::new(
                Intrinsics {
                    fx: rng.random_range(20.0..200.0),
                    fy: rng.random_range(20.0..200.0),
                    cx: rng.random_range(0.0..64.0),
                    cy: rng.random_range(0.0..64.0),
                },
                pose,
                64,
                64,
            )
            .unwrap();
            let p_cam = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.5..10.0),
            );
            let p_world = view.pose.camera_to_world(p_cam);
            let Some((px, py, _z)) = view.project(p_world) else { continue };
            if !(0.0..64.0).contains(&px) || !(0.0..64.0).contains(&py) {
                continue;
            }
            let ray = pixel_to_ray(&view, px, py).unwrap();
            // Distance from the point to the ray line.
            let rel = p_world - ray.origin;
            let dist = (rel - ray.dir * rel.dot(ray.dir)).norm();
            assert!(dist < 1e-9, "point off ray by {dist}");
            checked += 1;
        }
    }

    #[test]
    fn intersect_axis_aligned_case() {
        let ray = Ray::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0)).unwrap();
        let plane = PlaneParams::from_center(
            Vec3::new(0.0, 0.0, 5.0),
            Vec3::new(0.0, 0.0, -1.0),
            Vec3::new(1.0, 0.0, 0.0),
        )
        .unwrap();
        let (t, p) = intersect(&ray, &plane).unwrap();
        assert!((t - 5.0).abs() < 1e-12);
        assert!((p - Vec3::new(0.0, 0.0, 5.0)).norm() < 1e-12);
    }

    #[test]
    fn intersect_parallel_ray_errors() {
        let ray = Ray::new(Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0)).unwrap();
        let plane = PlaneParams::from_center(
            Vec3::new(0.0, 0.0, 3.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(1.0, 0.0, 0.0),
        )
        .unwrap();
        assert!(matches!(intersect(&ray, &plane), Err(GeometryError::NoIntersection)));
    }

    #[test]
    fn intersect_behind_ray_errors() {
        let ray = Ray::new(Vec3::ZERO, Vec3::new(0.0, 0.0, -1.0)).unwrap();
        let plane = PlaneParams::from_center(
            Vec3::new(0.0, 0.0, 5.0),
            Vec3::new(0.0, 0.0, -1.0),
            Vec3::new(1.0, 0.0, 0.0),
        )
        .unwrap();
        assert!(matches!(intersect(&ray, &plane), Err(GeometryError::BehindRay { .. })));
    }

    /// Brute-force oracle: scan t over [0, 100] on a fixed grid and keep the
    /// t minimizing the plane-equation residual.
    fn line_search_t(ray: &Ray, plane: &PlaneParams, step: f64) -> f64 {
        let mut best_t = 0.0;
        let mut best = f64::INFINITY;
        let n = (100.0 / step) as usize;
        for k in 0..=n {
            let t = k as f64 * step;
            let r = plane.signed_distance(ray.at(t)).abs();
            if r < best {
                best = r;
                best_t = t;
            }
        }
        best_t
    }

    #[test]
    fn intersect_matches_line_search_oracle() {
        let mut rng = rng(23);
        let step = 0.01;
        let mut checked = 0;
        while checked < 50 {
            let plane = random_plane(&mut rng);
            let origin = Vec3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let ray = Ray::new(origin, random_unit(&mut rng)).unwrap();
            match intersect(&ray, &plane) {
                Ok((t, p)) if t <= 100.0 => {
                    assert!(plane.signed_distance(p).abs() < 1e-9);
                    let oracle = line_search_t(&ray, &plane, step);
                    assert!((t - oracle).abs() <= step, "t={t} oracle={oracle}");
                    checked += 1;
                }
                _ => continue,
            }
        }
    }

    #[test]
    fn intersect_invariant_to_direction_scaling() {
        let mut rng = rng(31);
        for _ in 0..50 {
            let plane = random_plane(&mut rng);
            let origin = Vec3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let dir = random_unit(&mut rng);
            let scale = rng.random_range(0.1..10.0);
            let a = intersect(&Ray::new(origin, dir).unwrap(), &plane);
            let b = intersect(&Ray::new(origin, dir * scale).unwrap(), &plane);
            match (a, b) {
                (Ok((ta, _)), Ok((tb, _))) => assert!((ta - tb).abs() < 1e-9),
                (Err(_), Err(_)) => {}
                other => panic!("scaling changed the outcome: {other:?}"),
            }
        }
    }

    #[test]
    fn primary_axis_dominant_spread() {
        let pts = [
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 0.1, 0.0),
            Vec3::new(0.0, -0.1, 0.0),
        ];
        let axis = primary_axis(&pts, Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((axis - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn primary_axis_two_points() {
        let pts = [Vec3::ZERO, Vec3::new(0.0, 2.0, 0.0)];
        let axis = primary_axis(&pts, Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((axis - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn primary_axis_identical_points_degenerate() {
        let pts = [Vec3::new(1.0, 1.0, 1.0); 5];
        assert!(matches!(
            primary_axis(&pts, Vec3::new(0.0, 0.0, 1.0)),
            Err(GeometryError::DegenerateAxis)
        ));
    }

    /// Closed-form eigen oracle through the characteristic polynomial of the
    /// 3x3 covariance (trigonometric cubic roots), independent of the Jacobi
    /// path used by the implementation.
    fn char_poly_top_eigenvector(cov: &Mat3) -> Vec3 {
        let a = cov.rows;
        let p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
        let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let mut b = *cov;
        for i in 0..3 {
            b.rows[i][i] -= q;
        }
        let det_b = b.det() / (p * p * p);
        let r = (det_b / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let eig_max = q + 2.0 * p * phi.cos();
        // Null space of (cov - eig_max I) via cross products of its rows.
        let mut m = *cov;
        for i in 0..3 {
            m.rows[i][i] -= eig_max;
        }
        let candidates = [
            m.row(0).cross(m.row(1)),
            m.row(0).cross(m.row(2)),
            m.row(1).cross(m.row(2)),
        ];
        let best = candidates
            .iter()
            .max_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap())
            .unwrap();
        best.normalized().unwrap()
    }

    #[test]
    fn primary_axis_matches_char_poly_oracle() {
        let mut rng = rng(41);
        for _ in 0..50 {
            let plane = random_plane(&mut rng);
            let binormal = plane.binormal();
            // Anisotropic in-plane spread.
            let (su, sv) = (rng.random_range(1.0..3.0), rng.random_range(0.05..0.5));
            let pts: Vec<Vec3> = (0..100)
                .map(|_| {
                    plane.center
                        + plane.axis * rng.random_range(-su..su)
                        + binormal * rng.random_range(-sv..sv)
                })
                .collect();

            let axis = primary_axis(&pts, plane.normal).unwrap();
            assert!((axis.norm() - 1.0).abs() < 1e-9);
            assert!(axis.dot(plane.normal).abs() < 1e-6);

            let mut mean = Vec3::ZERO;
            for p in &pts {
                mean += *p;
            }
            mean = mean / pts.len() as f64;
            let mut cov = Mat3::ZERO;
            for p in &pts {
                cov.add_outer(*p - mean, 1.0 / pts.len() as f64);
            }
            let oracle = char_poly_top_eigenvector(&cov);
            let agreement = axis.dot(oracle).abs();
            assert!(agreement > 1.0 - 1e-6, "axis/oracle agreement {agreement}");
        }
    }

    #[test]
    fn polar_on_axis_and_perpendicular() {
        let plane = PlaneParams::from_center(
            Vec3::ZERO,
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(1.0, 0.0, 0.0),
        )
        .unwrap();
        let p = to_polar(Vec3::new(2.0, 0.0, 0.0), &plane);
        assert!((p.r - 2.0).abs() < 1e-12 && p.theta.abs() < 1e-12);
        let p = to_polar(Vec3::new(0.0, 1.0, 0.0), &plane);
        assert!((p.r - 1.0).abs() < 1e-12 && (p.theta - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn polar_center_convention() {
        let plane = PlaneParams::from_center(
            Vec3::new(1.0, 2.0, 3.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
        )
        .unwrap();
        let p = to_polar(plane.center, &plane);
        assert_eq!((p.r, p.theta), (0.0, 0.0));
    }

    #[test]
    fn polar_round_trip() {
        let mut rng = rng(57);
        for _ in 0..500 {
            let plane = random_plane(&mut rng);
            let polar = PolarPoint {
                r: rng.random_range(0.0..100.0),
                theta: rng.random_range(0.0..TAU),
            };
            let p = from_polar(polar, &plane);
            let back = to_polar(p, &plane);
            let q = from_polar(back, &plane);
            assert!((p - q).norm() < 1e-9);
            assert!(back.theta >= 0.0 && back.theta < TAU);
        }
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        let mut rng = rng(71);
        let views: Vec<CameraView> = (0..5)
            .map(|_| {
                let rotation =
                    Mat3::rotation_about(random_unit(&mut rng), rng.random_range(0.0..TAU));
                CameraView::new(
                    Intrinsics { fx: 50.0, fy: 60.0, cx: 31.5, cy: 23.5 },
                    Pose {
                        rotation,
                        translation: Vec3::new(
                            rng.random_range(-2.0..2.0),
                            rng.random_range(-2.0..2.0),
                            rng.random_range(-2.0..2.0),
                        ),
                    },
                    64,
                    48,
                )
                .unwrap()
            })
            .collect();
        write_trajectory(&path, &views).unwrap();
        let loaded = read_trajectory(&path).unwrap();
        assert_eq!(loaded.len(), views.len());
        for (a, b) in loaded.iter().zip(&views) {
            assert_eq!(a.intrinsics, b.intrinsics);
            assert_eq!(a.width, b.width);
            assert!((a.pose.translation - b.pose.translation).norm() < 1e-12);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((a.pose.rotation.rows[i][j] - b.pose.rotation.rows[i][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn look_at_points_camera_z_at_target() {
        let eye = Vec3::new(2.0, 0.0, 1.5);
        let target = Vec3::new(0.0, 0.0, 1.5);
        let pose = Pose::look_at(eye, target, Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert!(pose.rotation.orthonormality_error() < 1e-12);
        assert!((pose.rotation.det() - 1.0).abs() < 1e-12);
        let fwd = pose.rotation.col(2);
        assert!((fwd - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
        // Camera y (down) should oppose world up.
        assert!(pose.rotation.col(1).dot(Vec3::new(0.0, 0.0, 1.0)) < 0.0);
    }
}
