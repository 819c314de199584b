//! Sparse 3D feature volume built by unprojecting per-view features, with
//! view-consistency occupancy and occlusion handling.
//!
//! A voxel on a real surface receives nearly the same feature from every
//! view that sees it; a freespace voxel mixes features of unrelated surface
//! points, so its cross-view standard deviation is large. Occupancy is the
//! analytic score `exp(-||std|| / tau_std)` for voxels seen by enough
//! views. A second unprojection pass can exclude per-view occluded voxels
//! (those behind the first occupied voxel along each pixel ray), which
//! sharpens the statistics of everything in front.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::geometry::{pixel_to_ray, CameraView};
use crate::math::Vec3;
use crate::par;
use crate::synth::Bounds;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("feature map {index} is {got_w}x{got_h}x{got_c}, expected {want_w}x{want_h} with {want_c} channels")]
    FeatureShape {
        index: usize,
        got_w: usize,
        got_h: usize,
        got_c: usize,
        want_w: usize,
        want_h: usize,
        want_c: usize,
    },
    #[error("need one feature map per view ({views} views, {features} maps)")]
    FeatureCount { views: usize, features: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense per-view feature raster, row-major, channel-interleaved.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn sample(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Bilinear interpolation at continuous pixel coordinates (pixel
    /// centers at integers), clamped to the raster.
    pub fn sample_bilinear(&self, px: f64, py: f64) -> Vec<f64> {
        let x0 = px.floor().clamp(0.0, (self.width - 1) as f64);
        let y0 = py.floor().clamp(0.0, (self.height - 1) as f64);
        let fx = (px - x0).clamp(0.0, 1.0);
        let fy = (py - y0).clamp(0.0, 1.0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (s00, s10) = (self.sample(x0, y0), self.sample(x1, y0));
        let (s01, s11) = (self.sample(x0, y1), self.sample(x1, y1));
        (0..self.channels)
            .map(|c| {
                let top = s00[c] * (1.0 - fx) + s10[c] * fx;
                let bot = s01[c] * (1.0 - fx) + s11[c] * fx;
                top * (1.0 - fy) + bot * fy
            })
            .collect()
    }

    /// RGB features (C = 3) straight from a view's raster.
    pub fn from_rgb(view: &CameraView) -> FeatureMap {
        let mut data = Vec::with_capacity(view.pixels.len() * 3);
        for px in &view.pixels {
            data.extend_from_slice(px);
        }
        FeatureMap { width: view.width, height: view.height, channels: 3, data }
    }

    /// RGB plus luminance-gradient magnitudes (C = 5).
    pub fn from_rgb_grad(view: &CameraView) -> FeatureMap {
        let (w, h) = (view.width, view.height);
        let luma =
            |x: usize, y: usize| -> f64 { view.pixels[y * w + x].iter().sum::<f64>() / 3.0 };
        let mut data = Vec::with_capacity(w * h * 5);
        for y in 0..h {
            for x in 0..w {
                data.extend_from_slice(&view.pixels[y * w + x]);
                let gx = (luma((x + 1).min(w - 1), y) - luma(x.saturating_sub(1), y)) / 2.0;
                let gy = (luma(x, (y + 1).min(h - 1)) - luma(x, y.saturating_sub(1))) / 2.0;
                data.push(gx.abs());
                data.push(gy.abs());
            }
        }
        FeatureMap { width: w, height: h, channels: 5, data }
    }
}

/// Per-voxel aggregate over contributing views.
#[derive(Clone, Debug)]
pub struct VoxelAggregate {
    /// Componentwise mean feature.
    pub mean: Vec<f64>,
    /// Componentwise population standard deviation.
    pub std: Vec<f64>,
    /// Number of views that observed the voxel.
    pub count: u32,
    /// View-consistency score in [0, 1]; 0 until [`occupancy`] runs.
    pub occupancy: f64,
}

impl VoxelAggregate {
    pub fn std_norm(&self) -> f64 {
        self.std.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

/// Sparse voxel grid over an axis-aligned box; holds only observed voxels,
/// sorted by coordinate.
#[derive(Clone, Debug)]
pub struct SparseFeatureVolume {
    pub origin: Vec3,
    pub voxel_size: f64,
    pub channels: usize,
    pub dims: [i32; 3],
    entries: Vec<([i32; 3], VoxelAggregate)>,
    index: HashMap<[i32; 3], usize>,
}

impl SparseFeatureVolume {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[([i32; 3], VoxelAggregate)] {
        &self.entries
    }

    pub fn get(&self, coord: [i32; 3]) -> Option<&VoxelAggregate> {
        self.index.get(&coord).map(|&i| &self.entries[i].1)
    }

    pub fn entry_index(&self, coord: [i32; 3]) -> Option<usize> {
        self.index.get(&coord).copied()
    }

    pub fn center_of(&self, coord: [i32; 3]) -> Vec3 {
        self.origin
            + Vec3::new(
                (coord[0] as f64 + 0.5) * self.voxel_size,
                (coord[1] as f64 + 0.5) * self.voxel_size,
                (coord[2] as f64 + 0.5) * self.voxel_size,
            )
    }

    fn from_entries(
        origin: Vec3,
        voxel_size: f64,
        channels: usize,
        dims: [i32; 3],
        mut entries: Vec<([i32; 3], VoxelAggregate)>,
    ) -> Self {
        entries.sort_by_key(|(c, _)| *c);
        let index = entries.iter().enumerate().map(|(i, (c, _))| (*c, i)).collect();
        SparseFeatureVolume { origin, voxel_size, channels, dims, entries, index }
    }
}

/// One fragment's volume plus the indices of the views that built it.
#[derive(Clone, Debug)]
pub struct FragmentVolume {
    pub volume: SparseFeatureVolume,
    pub view_indices: Vec<usize>,
}

/// Per-view, per-entry occlusion flags produced by [`occlusion_mask`].
/// `occluded[v][e]` refers to entry `e` of the volume the mask was built
/// from, as seen by view `v`.
#[derive(Clone, Debug)]
pub struct VisibilityMask {
    pub occluded: Vec<Vec<bool>>,
    coords: Vec<[i32; 3]>,
}

impl VisibilityMask {
    pub fn is_occluded(&self, view: usize, entry: usize) -> bool {
        self.occluded[view][entry]
    }

    fn lookup(&self) -> HashMap<[i32; 3], usize> {
        self.coords.iter().enumerate().map(|(i, c)| (*c, i)).collect()
    }
}

fn check_features(views: &[CameraView], features: &[FeatureMap]) -> Result<usize, VolumeError> {
    if views.len() != features.len() {
        return Err(VolumeError::FeatureCount { views: views.len(), features: features.len() });
    }
    let channels = features.first().map(|f| f.channels).unwrap_or(0);
    for (i, (v, f)) in views.iter().zip(features).enumerate() {
        if f.width != v.width || f.height != v.height || f.channels != channels {
            return Err(VolumeError::FeatureShape {
                index: i,
                got_w: f.width,
                got_h: f.height,
                got_c: f.channels,
                want_w: v.width,
                want_h: v.height,
                want_c: channels,
            });
        }
    }
    Ok(channels)
}

/// How a voxel center's projection reads the feature raster.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Sampling {
    /// Nearest pixel center; exactly testable.
    #[default]
    Nearest,
    /// Bilinear interpolation of the four neighboring pixels.
    Bilinear,
}

/// Gather the per-view features observing one voxel center into a flat
/// buffer (`count * channels` values). `skip(view_idx)` suppresses
/// individual views (occlusion second pass).
fn gather(
    center: Vec3,
    views: &[CameraView],
    features: &[FeatureMap],
    channels: usize,
    sampling: Sampling,
    mut skip: impl FnMut(usize) -> bool,
) -> Vec<f64> {
    let mut buf = Vec::new();
    for (vi, (view, fmap)) in views.iter().zip(features).enumerate() {
        if skip(vi) {
            continue;
        }
        let Some((px, py, _z)) = view.project(center) else { continue };
        let (x, y) = (px.round(), py.round());
        if x < 0.0 || y < 0.0 || x >= view.width as f64 || y >= view.height as f64 {
            continue;
        }
        match sampling {
            Sampling::Nearest => buf.extend_from_slice(fmap.sample(x as usize, y as usize)),
            Sampling::Bilinear => buf.extend_from_slice(&fmap.sample_bilinear(px, py)),
        }
    }
    debug_assert_eq!(buf.len() % channels.max(1), 0);
    buf
}

fn aggregate(buf: &[f64], channels: usize) -> VoxelAggregate {
    let count = buf.len() / channels;
    let n = count as f64;
    let mut mean = vec![0.0; channels];
    for s in buf.chunks_exact(channels) {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; channels];
    for s in buf.chunks_exact(channels) {
        for c in 0..channels {
            let d = s[c] - mean[c];
            var[c] += d * d;
        }
    }
    let std = var.iter().map(|v| (v / n).max(0.0).sqrt()).collect();
    VoxelAggregate { mean, std, count: count as u32, occupancy: 0.0 }
}

/// Unproject per-view features into a sparse volume over `bounds`: every
/// voxel center that projects inside at least one view's raster (in front
/// of the camera) receives that view's feature at the nearest pixel;
/// per-voxel mean, population std, and view count are aggregated.
/// Degenerate bounds produce an empty volume.
pub fn unproject(
    views: &[CameraView],
    features: &[FeatureMap],
    bounds: Bounds,
    voxel_size: f64,
    sampling: Sampling,
) -> Result<SparseFeatureVolume, VolumeError> {
    let channels = check_features(views, features)?;
    let origin = bounds.min;
    let extent = bounds.max - bounds.min;
    let nx = (extent.x / voxel_size).ceil().max(0.0) as i32;
    let ny = (extent.y / voxel_size).ceil().max(0.0) as i32;
    let nz = (extent.z / voxel_size).ceil().max(0.0) as i32;
    let dims = [nx, ny, nz];

    let slabs: Vec<Vec<([i32; 3], VoxelAggregate)>> = par::map_indexed(nx.max(0) as usize, |ix| {
        let mut slab = Vec::new();
        for iy in 0..ny {
            for iz in 0..nz {
                let coord = [ix as i32, iy, iz];
                let center = origin
                    + Vec3::new(
                        (ix as f64 + 0.5) * voxel_size,
                        (iy as f64 + 0.5) * voxel_size,
                        (iz as f64 + 0.5) * voxel_size,
                    );
                let samples = gather(center, views, features, channels, sampling, |_| false);
                if !samples.is_empty() {
                    slab.push((coord, aggregate(&samples, channels)));
                }
            }
        }
        slab
    });

    let mut entries = Vec::new();
    for slab in slabs {
        entries.extend(slab);
    }
    Ok(SparseFeatureVolume::from_entries(origin, voxel_size, channels, dims, entries))
}

/// Re-aggregate an existing volume excluding per-view occluded samples.
/// Voxels that lose every observation drop out of the result.
pub fn unproject_with_visibility(
    volume: &SparseFeatureVolume,
    views: &[CameraView],
    features: &[FeatureMap],
    mask: &VisibilityMask,
    sampling: Sampling,
) -> Result<SparseFeatureVolume, VolumeError> {
    let channels = check_features(views, features)?;
    let mask_lookup = mask.lookup();
    let entries: Vec<Option<([i32; 3], VoxelAggregate)>> =
        par::map_indexed(volume.len(), |e| {
            let (coord, _) = &volume.entries()[e];
            let center = volume.center_of(*coord);
            let masked = mask_lookup.get(coord);
            let samples = gather(center, views, features, channels, sampling, |vi| {
                masked.map(|&m| mask.occluded[vi][m]).unwrap_or(false)
            });
            if samples.is_empty() {
                None
            } else {
                Some((*coord, aggregate(&samples, channels)))
            }
        });
    Ok(SparseFeatureVolume::from_entries(
        volume.origin,
        volume.voxel_size,
        channels,
        volume.dims,
        entries.into_iter().flatten().collect(),
    ))
}

/// View-consistency occupancy: `score = exp(-||std|| / tau_std)` for voxels
/// with at least `min_views` observations, 0 otherwise; the binary label is
/// `score >= 0.5`. Scores are stored back into the aggregates and returned
/// per entry.
pub fn occupancy(volume: &mut SparseFeatureVolume, tau_std: f64, min_views: u32) -> Vec<bool> {
    assert!(tau_std > 0.0);
    let mut labels = Vec::with_capacity(volume.len());
    for (_, agg) in &mut volume.entries {
        let score = if agg.count >= min_views { (-agg.std_norm() / tau_std).exp() } else { 0.0 };
        agg.occupancy = score;
        labels.push(score >= 0.5);
    }
    labels
}

/// A ray is considered to have passed through a surface once it has
/// traversed an occupied cell and then this many non-occupied cells;
/// everything after that is occluded. Counting free cells (rather than
/// distance) keeps grazing rays that travel inside a one-voxel-thick
/// surface layer from occluding their own surface.
pub const OCCLUSION_MARGIN_FREE_CELLS: usize = 2;

/// March every pixel ray of every view front-to-back through the volume's
/// grid; entries behind an occupied entry (with the free-cell margin above)
/// are flagged occluded for that view. Requires [`occupancy`] to have run.
pub fn occlusion_mask(volume: &SparseFeatureVolume, views: &[CameraView]) -> VisibilityMask {
    let coords: Vec<[i32; 3]> = volume.entries().iter().map(|(c, _)| *c).collect();
    let occupied: Vec<bool> =
        volume.entries().iter().map(|(_, a)| a.occupancy >= 0.5).collect();

    let per_view: Vec<Vec<bool>> = par::map_slice(views, |view| {
        let mut occluded = vec![false; volume.len()];
        for y in 0..view.height {
            for x in 0..view.width {
                let ray = pixel_to_ray(view, x as f64, y as f64).expect("pixel in raster");
                march_ray(volume, &occupied, ray.origin, ray.dir, &mut occluded);
            }
        }
        occluded
    });

    VisibilityMask { occluded: per_view, coords }
}

/// Amanatides-Woo traversal; flips `occluded` for entries strictly behind
/// the first occupied entry along the ray.
fn march_ray(
    volume: &SparseFeatureVolume,
    occupied: &[bool],
    origin: Vec3,
    dir: Vec3,
    occluded: &mut [bool],
) {
    let size = volume.voxel_size;
    let dims = volume.dims;
    let lo = volume.origin;
    let hi = lo + Vec3::new(dims[0] as f64, dims[1] as f64, dims[2] as f64) * size;

    // Clip the ray to the grid box.
    let mut t0: f64 = 0.0;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        let (o, d, l, h) = (origin[k], dir[k], lo[k], hi[k]);
        if d.abs() < 1e-15 {
            if o < l || o > h {
                return;
            }
        } else {
            let (ta, tb) = ((l - o) / d, (h - o) / d);
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if t0 > t1 {
        return;
    }

    let start = origin + dir * (t0 + 1e-12);
    let mut cell = [0i32; 3];
    let mut t_next = [0.0f64; 3];
    let mut t_step = [f64::INFINITY; 3];
    let mut step = [0i32; 3];
    for k in 0..3 {
        let f = (start[k] - lo[k]) / size;
        cell[k] = (f.floor() as i32).clamp(0, dims[k] - 1);
        if dir[k] > 1e-15 {
            step[k] = 1;
            t_next[k] = t0 + ((cell[k] as f64 + 1.0) * size + lo[k] - start[k]) / dir[k];
            t_step[k] = size / dir[k];
        } else if dir[k] < -1e-15 {
            step[k] = -1;
            t_next[k] = t0 + (cell[k] as f64 * size + lo[k] - start[k]) / dir[k];
            t_step[k] = -size / dir[k];
        } else {
            t_next[k] = f64::INFINITY;
        }
    }

    let mut seen_occupied = false;
    let mut free_run = 0usize;
    let mut occluding = false;
    loop {
        let entry = volume.entry_index(cell);
        if occluding {
            if let Some(e) = entry {
                occluded[e] = true;
            }
        } else {
            let cell_occupied = entry.map(|e| occupied[e]).unwrap_or(false);
            if cell_occupied {
                seen_occupied = true;
                free_run = 0;
            } else if seen_occupied {
                free_run += 1;
                if free_run >= OCCLUSION_MARGIN_FREE_CELLS {
                    occluding = true;
                }
            }
        }
        // Advance to the next cell boundary.
        let axis = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
            0
        } else if t_next[1] <= t_next[2] {
            1
        } else {
            2
        };
        if t_next[axis] > t1 {
            return;
        }
        cell[axis] += step[axis];
        if cell[axis] < 0 || cell[axis] >= dims[axis] {
            return;
        }
        t_next[axis] += t_step[axis];
    }
}

/// Final visibility-aware class of a voxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OccupancyStatus {
    /// View-consistent surface voxel.
    Occupied,
    /// Observed but view-inconsistent: freespace.
    Free,
    /// Every view that could observe it is blocked by occupied voxels in
    /// front: nothing can be said.
    Occluded,
}

/// Combine occupancy scores with the occlusion mask into the three-class
/// labeling: voxels whose every observing view is blocked are `Occluded`;
/// the rest are `Occupied`/`Free` by their stored occupancy score.
/// [`occupancy`] must have run on `volume`.
pub fn classify_occupancy(
    volume: &SparseFeatureVolume,
    views: &[CameraView],
    mask: &VisibilityMask,
) -> Vec<OccupancyStatus> {
    par::map_indexed(volume.len(), |e| {
        let (coord, agg) = &volume.entries()[e];
        let center = volume.center_of(*coord);
        let mut observing = 0;
        let mut blocked = 0;
        for (vi, view) in views.iter().enumerate() {
            let Some((px, py, _)) = view.project(center) else { continue };
            let (x, y) = (px.round(), py.round());
            if x < 0.0 || y < 0.0 || x >= view.width as f64 || y >= view.height as f64 {
                continue;
            }
            observing += 1;
            if mask.is_occluded(vi, e) {
                blocked += 1;
            }
        }
        if observing > 0 && blocked == observing {
            OccupancyStatus::Occluded
        } else if agg.occupancy >= 0.5 {
            OccupancyStatus::Occupied
        } else {
            OccupancyStatus::Free
        }
    })
}

/// Line-oriented dump, one voxel per line:
/// `x y z count mean... std... occ`.
pub fn write_volume_dump(path: &Path, volume: &SparseFeatureVolume) -> Result<(), VolumeError> {
    let mut out = String::new();
    for (coord, agg) in volume.entries() {
        write!(out, "{} {} {} {}", coord[0], coord[1], coord[2], agg.count).expect("write");
        for m in &agg.mean {
            write!(out, " {m}").expect("write");
        }
        for s in &agg.std {
            write!(out, " {s}").expect("write");
        }
        writeln!(out, " {}", agg.occupancy).expect("write");
    }
    std::fs::write(path, out)?;
    Ok(())
}
