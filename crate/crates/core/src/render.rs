//! Differentiable forward rendering of bounded planes and gradient-based
//! refinement of plane normals, offsets, boundary and color networks
//! against input frames.
//!
//! Per pixel: cast the ray, intersect every plane, keep the smallest
//! non-negative t (ties to the lower plane id), convert the hit to in-plane
//! polar coordinates `(r, theta)`, then
//!
//! ```text
//! color = f_color(theta, r) * sigmoid(beta * (f_boundary(theta) - r))
//!       + background * (1 - sigmoid(...))
//! ```
//!
//! The loss is the mean squared RGB error over all pixels of all views, and
//! [`render_loss_gradients`] backpropagates it analytically to each plane's
//! normal, offset, and both networks' parameters. The in-plane frame
//! (axis, binormal) is held as an explicit snapshot on [`BoundedPlane`], so
//! the differentiated function depends on the normal only through the
//! ray-plane intersection; the frame is re-orthogonalized between descent
//! steps, not inside them.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::geometry::{intersect, pixel_to_ray, CameraView, GeometryError, PlaneParams, EPS_PARALLEL};
use crate::math::Vec3;
use crate::mlp::{GradientTape, MlpError, MlpFunction};
use crate::par;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("view {view} carries no target raster of {expected} pixels")]
    MissingTarget { view: usize, expected: usize },
    #[error("need at least one view")]
    NoViews,
    #[error("refinement diverged at iteration {iteration}")]
    Diverged { iteration: usize, last: Box<RefineResult> },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A plane instance with its polar boundary and color functions.
///
/// `binormal` completes `(axis, binormal, normal)` to a right-handed frame
/// and is stored explicitly: rendering reads the frame from here, never
/// recomputing it from the (possibly mid-refinement) normal.
#[derive(Clone, Debug)]
pub struct BoundedPlane {
    pub id: u32,
    pub params: PlaneParams,
    pub binormal: Vec3,
    pub boundary: MlpFunction,
    pub color: MlpFunction,
}

impl BoundedPlane {
    pub fn new(
        id: u32,
        params: PlaneParams,
        boundary: MlpFunction,
        color: MlpFunction,
    ) -> Result<Self, RenderError> {
        let plane = BoundedPlane { id, params, binormal: params.binormal(), boundary, color };
        plane.validate()?;
        Ok(plane)
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        self.params.validate()?;
        for k in 0..64 {
            let theta = k as f64 / 64.0 * std::f64::consts::TAU;
            let r = self.boundary.forward(&[theta])?[0];
            if !(r > 0.0) {
                return Err(RenderError::Mlp(MlpError::NonFinite));
            }
        }
        Ok(())
    }

    /// Boundary radius at `theta`.
    pub fn radius_at(&self, theta: f64) -> f64 {
        self.boundary.forward(&[theta]).expect("boundary input is always 1-d")[0]
    }

    /// Restore structural invariants after a descent step and refresh the
    /// frame snapshot.
    fn renormalize(&mut self) -> Result<(), GeometryError> {
        self.params.renormalize()?;
        self.binormal = self.params.binormal();
        Ok(())
    }
}

/// Raster produced by [`render`]: color, winning plane id, and ray
/// parameter t per pixel (`None` / `+inf` where nothing is hit).
#[derive(Clone, Debug)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
    pub hit: Vec<Option<u32>>,
    pub t: Vec<f64>,
}

/// Settings for [`refine`].
#[derive(Clone, Copy, Debug)]
pub struct RefineConfig {
    /// Step size for the plane normal (on the unit sphere).
    pub lr_normal: f64,
    /// Step size for the plane offset.
    pub lr_offset: f64,
    /// Step size for boundary-network parameters.
    pub lr_boundary: f64,
    /// Step size for color-network parameters.
    pub lr_color: f64,
    /// Gradient-descent iteration budget.
    pub iterations: usize,
    /// Sigmoid sharpness of the boundary gate, per scene unit.
    pub beta: f64,
    /// Color rendered where no plane is hit or outside the gate.
    pub background: [f64; 3],
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            lr_normal: 0.02,
            lr_offset: 0.1,
            lr_boundary: 1e-3,
            lr_color: 1e-3,
            iterations: 200,
            beta: 20.0,
            background: [0.5, 0.5, 0.5],
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> bool {
        self.beta > 0.0 && self.iterations >= 1 && self.lr_normal >= 0.0 && self.lr_offset >= 0.0
    }
}

/// Gradients of the rendering loss for one plane, aligned with the plane's
/// parameterization (`boundary` / `color` match the networks' flat buffers).
#[derive(Clone, Debug)]
pub struct PlaneGrads {
    pub normal: Vec3,
    pub offset: f64,
    pub boundary: Vec<f64>,
    pub color: Vec<f64>,
}

struct PixelShade {
    rgb: [f64; 3],
    hit: Option<usize>,
    t: f64,
    // Read by the shading tests.
    #[allow(dead_code)]
    polar: (f64, f64),
    #[allow(dead_code)]
    weight: f64,
}

fn winning_plane(
    planes: &[BoundedPlane],
    ray: &crate::geometry::Ray,
) -> Option<(usize, f64, Vec3)> {
    let mut best: Option<(usize, f64, Vec3)> = None;
    for (idx, plane) in planes.iter().enumerate() {
        if let Ok((t, p)) = intersect(ray, &plane.params) {
            let better = match &best {
                None => true,
                Some((bidx, bt, _)) => t < *bt || (t == *bt && plane.id < planes[*bidx].id),
            };
            if better {
                best = Some((idx, t, p));
            }
        }
    }
    best
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn wrap_angle(mut theta: f64) -> f64 {
    if theta < 0.0 {
        theta += std::f64::consts::TAU;
    }
    if theta >= std::f64::consts::TAU {
        theta = 0.0;
    }
    theta
}

fn shade_pixel(
    planes: &[BoundedPlane],
    view: &CameraView,
    x: usize,
    y: usize,
    beta: f64,
    background: [f64; 3],
) -> PixelShade {
    let ray = pixel_to_ray(view, x as f64, y as f64).expect("pixel index inside raster");
    match winning_plane(planes, &ray) {
        None => PixelShade {
            rgb: background,
            hit: None,
            t: f64::INFINITY,
            polar: (0.0, 0.0),
            weight: 0.0,
        },
        Some((idx, t, point)) => {
            let plane = &planes[idx];
            let rel = point - plane.params.center;
            let r = rel.norm();
            let theta = wrap_angle(rel.dot(plane.binormal).atan2(rel.dot(plane.params.axis)));
            let rho = plane.boundary.forward(&[theta]).expect("boundary forward")[0];
            let w = sigmoid(beta * (rho - r));
            let col = plane.color.forward(&[theta, r]).expect("color forward");
            let rgb = [
                w * col[0] + (1.0 - w) * background[0],
                w * col[1] + (1.0 - w) * background[1],
                w * col[2] + (1.0 - w) * background[2],
            ];
            PixelShade { rgb, hit: Some(idx), t, polar: (r, theta), weight: w }
        }
    }
}

/// Render the planes into the view's raster geometry. Any target pixels on
/// `view` are ignored; only pose, intrinsics and size are used.
pub fn render(
    planes: &[BoundedPlane],
    view: &CameraView,
    beta: f64,
    background: [f64; 3],
) -> RenderedImage {
    let (w, h) = (view.width, view.height);
    let shaded = par::map_indexed(w * h, |i| {
        let s = shade_pixel(planes, view, i % w, i / w, beta, background);
        (s.rgb, s.hit.map(|idx| planes[idx].id), s.t)
    });
    let mut rgb = Vec::with_capacity(w * h);
    let mut hit = Vec::with_capacity(w * h);
    let mut t = Vec::with_capacity(w * h);
    for (c, id, tv) in shaded {
        rgb.push(c);
        hit.push(id);
        t.push(tv);
    }
    RenderedImage { width: w, height: h, rgb, hit, t }
}

fn check_targets(views: &[CameraView]) -> Result<usize, RenderError> {
    if views.is_empty() {
        return Err(RenderError::NoViews);
    }
    let mut total = 0;
    for (i, v) in views.iter().enumerate() {
        let expected = v.width * v.height;
        if v.pixels.len() != expected {
            return Err(RenderError::MissingTarget { view: i, expected });
        }
        total += expected;
    }
    Ok(total)
}

/// Mean over all pixels of all views, and over the 3 channels, of the
/// squared RGB error between the rendering and each view's pixels.
pub fn render_loss(
    planes: &[BoundedPlane],
    views: &[CameraView],
    beta: f64,
    background: [f64; 3],
) -> Result<f64, RenderError> {
    let total_px = check_targets(views)?;
    let mut sq_sum = 0.0;
    for view in views {
        let n = view.width * view.height;
        let view_sum = par::fold_chunks(
            n,
            par::DEFAULT_CHUNK,
            |range| {
                let mut acc = 0.0;
                for i in range {
                    let s =
                        shade_pixel(planes, view, i % view.width, i / view.width, beta, background);
                    let tgt = view.pixels[i];
                    for c in 0..3 {
                        let d = s.rgb[c] - tgt[c];
                        acc += d * d;
                    }
                }
                acc
            },
            |a, b| a + b,
        )
        .unwrap_or(0.0);
        sq_sum += view_sum;
    }
    Ok(sq_sum / (total_px as f64 * 3.0))
}

/// Per-chunk gradient accumulator for one plane.
struct PlaneAccum {
    normal: Vec3,
    offset: f64,
    bnd_tape: GradientTape,
    col_tape: GradientTape,
}

impl PlaneAccum {
    fn new() -> Self {
        PlaneAccum {
            normal: Vec3::ZERO,
            offset: 0.0,
            bnd_tape: GradientTape::new(),
            col_tape: GradientTape::new(),
        }
    }
}

fn merge_grad_vec(into: &mut Vec<f64>, from: &[f64]) {
    if from.is_empty() {
        return;
    }
    if into.is_empty() {
        into.extend_from_slice(from);
    } else {
        for (a, b) in into.iter_mut().zip(from) {
            *a += b;
        }
    }
}

struct ChunkAccum {
    sq: f64,
    planes: Vec<PlaneAccum>,
}

fn merge_chunks(mut a: ChunkAccum, b: &ChunkAccum) -> ChunkAccum {
    a.sq += b.sq;
    for (pa, pb) in a.planes.iter_mut().zip(&b.planes) {
        pa.normal += pb.normal;
        pa.offset += pb.offset;
        merge_grad_vec(&mut pa.bnd_tape.grads, &pb.bnd_tape.grads);
        merge_grad_vec(&mut pa.col_tape.grads, &pb.col_tape.grads);
    }
    a
}

/// Loss and its analytic gradients with respect to every plane's normal,
/// offset, and both networks' parameters. Normal gradients are projected to
/// the tangent space of the unit sphere. Pixels whose ray is near-parallel
/// to a plane contribute nothing for that plane.
pub fn render_loss_gradients(
    planes: &[BoundedPlane],
    views: &[CameraView],
    beta: f64,
    background: [f64; 3],
) -> Result<(f64, Vec<PlaneGrads>), RenderError> {
    let total_px = check_targets(views)?;
    let upstream_scale = 2.0 / (total_px as f64 * 3.0);

    // One flat chunk list across every view keeps all cores busy; chunk
    // boundaries are fixed, and partials merge in chunk order, so results
    // do not depend on thread count.
    let mut chunk_spans: Vec<(usize, std::ops::Range<usize>)> = Vec::new();
    for (vi, view) in views.iter().enumerate() {
        let n = view.width * view.height;
        for start in (0..n).step_by(par::DEFAULT_CHUNK) {
            chunk_spans.push((vi, start..(start + par::DEFAULT_CHUNK).min(n)));
        }
    }
    let partials: Vec<ChunkAccum> = par::map_slice(&chunk_spans, |(vi, range)| {
        let view = &views[*vi];
        let mut acc =
            ChunkAccum { sq: 0.0, planes: (0..planes.len()).map(|_| PlaneAccum::new()).collect() };
        for i in range.clone() {
            accumulate_pixel(
                planes,
                view,
                i % view.width,
                i / view.width,
                beta,
                background,
                upstream_scale,
                &mut acc,
            );
        }
        acc
    });
    let mut total =
        ChunkAccum { sq: 0.0, planes: (0..planes.len()).map(|_| PlaneAccum::new()).collect() };
    for p in &partials {
        total = merge_chunks(total, p);
    }

    let loss = total.sq / (total_px as f64 * 3.0);
    let grads = planes
        .iter()
        .zip(total.planes)
        .map(|(plane, acc)| {
            let n = plane.params.normal;
            // Tangent-space projection on the unit sphere.
            let g = acc.normal - n * acc.normal.dot(n);
            let mut boundary = acc.bnd_tape.grads;
            if boundary.is_empty() {
                boundary = vec![0.0; plane.boundary.param_count()];
            }
            let mut color = acc.col_tape.grads;
            if color.is_empty() {
                color = vec![0.0; plane.color.param_count()];
            }
            PlaneGrads { normal: g, offset: acc.offset, boundary, color }
        })
        .collect();
    Ok((loss, grads))
}

#[allow(clippy::too_many_arguments)]
fn accumulate_pixel(
    planes: &[BoundedPlane],
    view: &CameraView,
    x: usize,
    y: usize,
    beta: f64,
    background: [f64; 3],
    upstream_scale: f64,
    acc: &mut ChunkAccum,
) {
    let i = y * view.width + x;
    let ray = pixel_to_ray(view, x as f64, y as f64).expect("pixel index inside raster");
    let target = view.pixels[i];

    let Some((idx, _t, point)) = winning_plane(planes, &ray) else {
        for c in 0..3 {
            let d = background[c] - target[c];
            acc.sq += d * d;
        }
        return;
    };

    let plane = &planes[idx];
    let pa = &mut acc.planes[idx];
    let rel = point - plane.params.center;
    let r = rel.norm();
    let px = rel.dot(plane.params.axis);
    let py = rel.dot(plane.binormal);
    let theta = wrap_angle(py.atan2(px));

    let rho = plane
        .boundary
        .forward_recorded(&[theta], &mut pa.bnd_tape)
        .expect("boundary forward")[0];
    let w = sigmoid(beta * (rho - r));
    let col = plane
        .color
        .forward_recorded(&[theta, r], &mut pa.col_tape)
        .expect("color forward");

    let mut d_w = 0.0;
    let mut up_col = [0.0; 3];
    for c in 0..3 {
        let pixel = w * col[c] + (1.0 - w) * background[c];
        let diff = pixel - target[c];
        acc.sq += diff * diff;
        let up = upstream_scale * diff;
        d_w += up * (col[c] - background[c]);
        up_col[c] = up * w;
    }

    // Color network: parameter grads into the tape, input grads out.
    let col_in = plane.color.backward(&mut pa.col_tape, &up_col).expect("color backward");
    // Boundary network through the gate: dL/drho = dL/dw * beta * w * (1-w).
    let gate = beta * w * (1.0 - w);
    let bnd_in =
        plane.boundary.backward(&mut pa.bnd_tape, &[d_w * gate]).expect("boundary backward");

    let d_theta = col_in[0] + bnd_in[0];
    let d_r = col_in[1] - d_w * gate;

    // Geometry chain: (r, theta) -> rel -> t -> (N, d).
    if r < 1e-12 {
        return;
    }
    let plane_r2 = px * px + py * py;
    let mut d_rel = rel * (d_r / r);
    if plane_r2 > 1e-24 {
        d_rel += (plane.binormal * px - plane.params.axis * py) * (d_theta / plane_r2);
    }
    let s = ray.dir.dot(plane.params.normal);
    if s.abs() <= EPS_PARALLEL {
        return;
    }
    let d_t = d_rel.dot(ray.dir);
    let u = ray.origin.dot(plane.params.normal) + plane.params.offset;
    // t = -u / s  =>  dt/dN = -P0/s + u V / s^2, dt/dd = -1/s.
    pa.normal += (ray.origin * (-1.0 / s) + ray.dir * (u / (s * s))) * d_t;
    pa.offset += d_t * (-1.0 / s);
}

/// Result of [`refine`]: the lowest-loss iterate, the raw loss trace
/// (`iterations + 1` entries, the first being the initial loss), and where
/// the best iterate occurred.
#[derive(Clone, Debug)]
pub struct RefineResult {
    pub planes: Vec<BoundedPlane>,
    pub trace: Vec<f64>,
    pub best_loss: f64,
    pub best_iteration: usize,
}

impl RefineResult {
    /// Running minimum of the loss trace; non-increasing by construction.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.trace
            .iter()
            .map(|&l| {
                best = best.min(l);
                best
            })
            .collect()
    }
}

/// Plain gradient descent on the rendering loss with per-group learning
/// rates. After every step the normal is renormalized, the center slid back
/// onto the plane, and the frame re-orthogonalized. Returns the iterate
/// with the lowest observed loss.
pub fn refine(
    planes: &[BoundedPlane],
    views: &[CameraView],
    config: &RefineConfig,
) -> Result<RefineResult, RenderError> {
    assert!(config.validate(), "invalid refine config");
    let mut current: Vec<BoundedPlane> = planes.to_vec();
    let mut best: Vec<BoundedPlane> = planes.to_vec();
    let mut best_loss = f64::INFINITY;
    let mut best_iteration = 0;
    let mut trace = Vec::with_capacity(config.iterations + 1);

    for iteration in 0..=config.iterations {
        let (loss, grads) = if iteration < config.iterations {
            render_loss_gradients(&current, views, config.beta, config.background)?
        } else {
            (render_loss(&current, views, config.beta, config.background)?, Vec::new())
        };
        if !loss.is_finite() {
            let result =
                RefineResult { planes: best, trace: trace.clone(), best_loss, best_iteration };
            return Err(RenderError::Diverged { iteration, last: Box::new(result) });
        }
        trace.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best_iteration = iteration;
            best = current.clone();
        }
        if iteration == config.iterations {
            break;
        }
        for (plane, g) in current.iter_mut().zip(&grads) {
            plane.params.normal -= g.normal * config.lr_normal;
            plane.params.offset -= g.offset * config.lr_offset;
            for (p, gv) in plane.boundary.params_mut().iter_mut().zip(&g.boundary) {
                *p -= gv * config.lr_boundary;
            }
            for (p, gv) in plane.color.params_mut().iter_mut().zip(&g.color) {
                *p -= gv * config.lr_color;
            }
            plane.renormalize()?;
        }
    }

    Ok(RefineResult { planes: best, trace, best_loss, best_iteration })
}

/// Write a loss trace as `iteration,loss` CSV with a header row.
pub fn write_loss_trace(path: &Path, trace: &[f64]) -> Result<(), RenderError> {
    let mut out = String::from("iteration,loss\n");
    for (i, l) in trace.iter().enumerate() {
        writeln!(out, "{i},{l}").expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Angular samples of the boundary when exporting meshes.
pub const OBJ_BOUNDARY_SAMPLES: usize = 64;

/// Export planes as an OBJ mesh: one group per instance, the boundary
/// polygon triangulated as a fan around the plane center.
pub fn export_obj(path: &Path, planes: &[BoundedPlane]) -> Result<(), RenderError> {
    let mut out = String::from("# bounded plane reconstruction\n");
    let mut vertex_base = 1usize; // OBJ indices are 1-based
    for plane in planes {
        writeln!(out, "g plane_{}", plane.id).expect("write");
        let center = plane.params.center;
        writeln!(out, "v {} {} {}", center.x, center.y, center.z).expect("write");
        for k in 0..OBJ_BOUNDARY_SAMPLES {
            let theta = k as f64 / OBJ_BOUNDARY_SAMPLES as f64 * std::f64::consts::TAU;
            let r = plane.radius_at(theta);
            let p = center
                + plane.params.axis * (r * theta.cos())
                + plane.binormal * (r * theta.sin());
            writeln!(out, "v {} {} {}", p.x, p.y, p.z).expect("write");
        }
        for k in 0..OBJ_BOUNDARY_SAMPLES {
            let a = vertex_base + 1 + k;
            let b = vertex_base + 1 + (k + 1) % OBJ_BOUNDARY_SAMPLES;
            writeln!(out, "f {} {} {}", vertex_base, a, b).expect("write");
        }
        vertex_base += OBJ_BOUNDARY_SAMPLES + 1;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Sidecar text: one line per plane,
/// `id nx ny nz d cx cy cz ax ay az`.
pub fn write_plane_sidecar(path: &Path, planes: &[BoundedPlane]) -> Result<(), RenderError> {
    let mut out = String::new();
    for plane in planes {
        let p = &plane.params;
        writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {} {}",
            plane.id, p.normal.x, p.normal.y, p.normal.z, p.offset,
            p.center.x, p.center.y, p.center.z, p.axis.x, p.axis.y, p.axis.z
        )
        .expect("write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

const PLANES_MAGIC: &[u8; 4] = b"PLNB";

/// Binary plane container: magic, u32 count, then per plane its id, the ten
/// little-endian f64 plane parameters (normal, offset, center, axis), and
/// both networks in their flat little-endian serialization.
pub fn write_planes_bin(path: &Path, planes: &[BoundedPlane]) -> Result<(), RenderError> {
    let mut out = Vec::new();
    out.extend_from_slice(PLANES_MAGIC);
    out.extend_from_slice(&(planes.len() as u32).to_le_bytes());
    for plane in planes {
        out.extend_from_slice(&plane.id.to_le_bytes());
        let p = &plane.params;
        for v in [
            p.normal.x, p.normal.y, p.normal.z, p.offset,
            p.center.x, p.center.y, p.center.z,
            p.axis.x, p.axis.y, p.axis.z,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        plane.boundary.write_into(&mut out);
        plane.color.write_into(&mut out);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a plane container written by [`write_planes_bin`].
pub fn read_planes_bin(path: &Path) -> Result<Vec<BoundedPlane>, RenderError> {
    let data = std::fs::read(path)?;
    let parse_err = |msg: &str| RenderError::Mlp(MlpError::Parse(msg.into()));
    if data.len() < 8 || &data[..4] != PLANES_MAGIC {
        return Err(parse_err("bad plane container magic"));
    }
    let count = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
    let mut pos = 8usize;
    let mut planes = Vec::with_capacity(count);
    for _ in 0..count {
        if pos + 4 + 80 > data.len() {
            return Err(parse_err("truncated plane record"));
        }
        let id = u32::from_le_bytes(data[pos..pos + 4].try_into().unwrap());
        pos += 4;
        let mut vals = [0.0f64; 10];
        for v in &mut vals {
            *v = f64::from_le_bytes(data[pos..pos + 8].try_into().unwrap());
            pos += 8;
        }
        let params = PlaneParams::new(
            Vec3::new(vals[0], vals[1], vals[2]),
            vals[3],
            Vec3::new(vals[4], vals[5], vals[6]),
            Vec3::new(vals[7], vals[8], vals[9]),
        )?;
        let boundary = MlpFunction::read_from(&data, &mut pos)?;
        let color = MlpFunction::read_from(&data, &mut pos)?;
        planes.push(BoundedPlane::new(id, params, boundary, color)?);
    }
    Ok(planes)
}
