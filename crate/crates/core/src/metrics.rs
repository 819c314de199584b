//! Evaluation: 3D geometry metrics (accuracy, completeness, precision,
//! recall, F-score) between sampled surfaces, nearest-neighbor label
//! transfer, and partition-comparison metrics (rand index, variation of
//! information, segmentation covering).
//!
//! Nearest-neighbor queries run on a uniform hash grid with an expanding
//! ring search; ties are broken by the lowest point index, so results are
//! identical to a brute-force double loop.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::geometry::{from_polar, PlaneParams, PolarPoint};
use crate::math::Vec3;
use crate::par;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("surface has no points")]
    EmptySurface,
    #[error("label arrays differ in length ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Points densely sampled on predicted or ground-truth planes, with their
/// instance labels.
#[derive(Clone, Debug, Default)]
pub struct SampledSurface {
    pub points: Vec<Vec3>,
    pub labels: Vec<u32>,
}

impl SampledSurface {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.is_empty() {
            return Err(MetricsError::EmptySurface);
        }
        if self.points.len() != self.labels.len() {
            return Err(MetricsError::LengthMismatch { a: self.points.len(), b: self.labels.len() });
        }
        Ok(())
    }
}

/// 3D reconstruction quality between two sampled surfaces.
#[derive(Clone, Copy, Debug)]
pub struct GeometryReport {
    /// Mean distance from ground-truth points to the prediction.
    pub comp: f64,
    /// Mean distance from predicted points to the ground truth.
    pub acc: f64,
    /// Fraction of ground-truth points within the threshold of the
    /// prediction.
    pub recall: f64,
    /// Fraction of predicted points within the threshold of the ground
    /// truth.
    pub prec: f64,
    /// Harmonic mean of precision and recall (0 when both vanish).
    pub f_score: f64,
    pub threshold: f64,
}

/// Partition-comparison metrics.
#[derive(Clone, Copy, Debug)]
pub struct SegmentationReport {
    /// Variation of information, nats; 0 for identical partitions.
    pub voi: f64,
    /// Rand index in [0, 1]; 1 for identical partitions.
    pub ri: f64,
    /// Segmentation covering of the first (reference) partition by the
    /// second, weighted by reference region size.
    pub sc: f64,
}

/// Uniform hash grid over a point set for nearest-neighbor queries.
pub struct PointGrid<'a> {
    points: &'a [Vec3],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> PointGrid<'a> {
    pub fn build(points: &'a [Vec3]) -> Self {
        assert!(!points.is_empty());
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.min(*p);
            hi = hi.max(*p);
        }
        let extent = (hi - lo).norm().max(1e-9);
        // Aim for a handful of points per cell.
        let cell = (extent / (points.len() as f64).cbrt()).max(1e-9);
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(*p, cell)).or_default().push(i);
        }
        PointGrid { points, cell, cells }
    }

    fn key(p: Vec3, cell: f64) -> [i64; 3] {
        [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64]
    }

    fn scan_ring(&self, center: [i64; 3], ring: i64, q: Vec3, best: &mut Option<(f64, usize)>) {
        for dx in -ring..=ring {
            for dy in -ring..=ring {
                for dz in -ring..=ring {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                        continue;
                    }
                    let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                    let Some(bucket) = self.cells.get(&key) else { continue };
                    for &i in bucket {
                        let d2 = (self.points[i] - q).norm_squared();
                        let better = match *best {
                            None => true,
                            Some((bd2, bi)) => d2 < bd2 || (d2 == bd2 && i < bi),
                        };
                        if better {
                            *best = Some((d2, i));
                        }
                    }
                }
            }
        }
    }

    fn brute(&self, q: Vec3) -> (usize, f64) {
        let mut best = (f64::INFINITY, usize::MAX);
        for (i, p) in self.points.iter().enumerate() {
            let d2 = (*p - q).norm_squared();
            if d2 < best.0 {
                best = (d2, i);
            }
        }
        (best.1, best.0.sqrt())
    }

    /// Index and distance of the nearest point; exact ties resolve to the
    /// lowest index.
    pub fn nearest(&self, q: Vec3) -> (usize, f64) {
        // Queries much farther from the set than the cell size fall back to
        // a full scan rather than expanding rings across empty space.
        const LOCAL_RINGS: i64 = 4;
        let center = Self::key(q, self.cell);
        let mut best: Option<(f64, usize)> = None;
        let mut ring = 0i64;
        loop {
            match best {
                // Ring r can only help while its closest possible point is
                // nearer than the current best.
                Some((bd2, _)) => {
                    let ring_min = (ring - 1).max(0) as f64 * self.cell;
                    if ring_min * ring_min > bd2 {
                        break;
                    }
                }
                None => {
                    if ring > LOCAL_RINGS {
                        return self.brute(q);
                    }
                }
            }
            self.scan_ring(center, ring, q, &mut best);
            ring += 1;
        }
        let (d2, i) = best.expect("non-empty grid");
        (i, d2.sqrt())
    }
}

/// Distances from each query point to its nearest neighbor in `targets`.
fn nearest_distances(queries: &[Vec3], targets: &[Vec3]) -> Vec<f64> {
    let grid = PointGrid::build(targets);
    par::map_slice(queries, |q| grid.nearest(*q).1)
}

/// Geometry metrics between a predicted and a ground-truth surface at the
/// given distance threshold.
pub fn geometry_metrics(
    pred: &SampledSurface,
    gt: &SampledSurface,
    threshold: f64,
) -> Result<GeometryReport, MetricsError> {
    pred.validate()?;
    gt.validate()?;
    let pred_d = nearest_distances(&pred.points, &gt.points);
    let gt_d = nearest_distances(&gt.points, &pred.points);
    let acc = pred_d.iter().sum::<f64>() / pred_d.len() as f64;
    let comp = gt_d.iter().sum::<f64>() / gt_d.len() as f64;
    let prec = pred_d.iter().filter(|d| **d <= threshold).count() as f64 / pred_d.len() as f64;
    let recall = gt_d.iter().filter(|d| **d <= threshold).count() as f64 / gt_d.len() as f64;
    let f_score = if prec + recall > 0.0 { 2.0 * prec * recall / (prec + recall) } else { 0.0 };
    Ok(GeometryReport { comp, acc, recall, prec, f_score, threshold })
}

/// Give every point of `to` the label of its nearest point in `from`.
pub fn transfer_labels(
    from: &SampledSurface,
    to: &SampledSurface,
) -> Result<SampledSurface, MetricsError> {
    from.validate()?;
    to.validate()?;
    let grid = PointGrid::build(&from.points);
    let labels = par::map_slice(&to.points, |p| from.labels[grid.nearest(*p).0]);
    Ok(SampledSurface { points: to.points.clone(), labels })
}

struct Contingency {
    n: f64,
    joint: HashMap<(u32, u32), f64>,
    a_sizes: HashMap<u32, f64>,
    b_sizes: HashMap<u32, f64>,
}

fn contingency(labels_a: &[u32], labels_b: &[u32]) -> Contingency {
    let mut joint: HashMap<(u32, u32), f64> = HashMap::new();
    let mut a_sizes: HashMap<u32, f64> = HashMap::new();
    let mut b_sizes: HashMap<u32, f64> = HashMap::new();
    for (&a, &b) in labels_a.iter().zip(labels_b) {
        *joint.entry((a, b)).or_default() += 1.0;
        *a_sizes.entry(a).or_default() += 1.0;
        *b_sizes.entry(b).or_default() += 1.0;
    }
    Contingency { n: labels_a.len() as f64, joint, a_sizes, b_sizes }
}

fn comb2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Partition metrics between two labelings of the same point set. The
/// first argument is the reference (ground truth) side: segmentation
/// covering measures how well the second covers the first.
pub fn segmentation_metrics(
    labels_a: &[u32],
    labels_b: &[u32],
) -> Result<SegmentationReport, MetricsError> {
    if labels_a.len() != labels_b.len() {
        return Err(MetricsError::LengthMismatch { a: labels_a.len(), b: labels_b.len() });
    }
    if labels_a.is_empty() {
        return Err(MetricsError::EmptySurface);
    }
    let c = contingency(labels_a, labels_b);

    // Rand index by pair counting.
    let total_pairs = comb2(c.n);
    let ri = if total_pairs == 0.0 {
        1.0
    } else {
        let sum_joint: f64 = c.joint.values().map(|&x| comb2(x)).sum();
        let sum_a: f64 = c.a_sizes.values().map(|&x| comb2(x)).sum();
        let sum_b: f64 = c.b_sizes.values().map(|&x| comb2(x)).sum();
        let disagreements = sum_a + sum_b - 2.0 * sum_joint;
        (total_pairs - disagreements) / total_pairs
    };

    // Variation of information in nats.
    let h = |sizes: &HashMap<u32, f64>| -> f64 {
        sizes
            .values()
            .map(|&s| {
                let p = s / c.n;
                -p * p.ln()
            })
            .sum()
    };
    let mut mi = 0.0;
    for (&(a, b), &nij) in &c.joint {
        let pij = nij / c.n;
        let pa = c.a_sizes[&a] / c.n;
        let pb = c.b_sizes[&b] / c.n;
        mi += pij * (pij / (pa * pb)).ln();
    }
    let voi = (h(&c.a_sizes) + h(&c.b_sizes) - 2.0 * mi).max(0.0);

    // Segmentation covering of A by B.
    let mut sc = 0.0;
    for (&a, &na) in &c.a_sizes {
        let mut best_iou = 0.0f64;
        for (&b, &nb) in &c.b_sizes {
            let inter = c.joint.get(&(a, b)).copied().unwrap_or(0.0);
            if inter > 0.0 {
                best_iou = best_iou.max(inter / (na + nb - inter));
            }
        }
        sc += na / c.n * best_iou;
    }

    Ok(SegmentationReport { voi, ri, sc })
}

/// Spacing of the surface samplers: one point per `spacing^2` of area.
pub const SAMPLE_SPACING: f64 = 0.02;

/// Stratified polar-grid sampling of a bounded plane: rings every `spacing`
/// with arc steps of about `spacing`, keeping points whose radius is inside
/// `boundary(theta)`. Includes the center point.
pub fn sample_plane_surface(
    params: &PlaneParams,
    boundary: &dyn Fn(f64) -> f64,
    spacing: f64,
    label: u32,
    out: &mut SampledSurface,
) {
    let max_r = (0..128)
        .map(|k| boundary(k as f64 / 128.0 * std::f64::consts::TAU))
        .fold(0.0f64, f64::max);
    out.points.push(params.center);
    out.labels.push(label);
    let mut r = spacing * 0.5;
    while r <= max_r {
        let steps = ((std::f64::consts::TAU * r / spacing).round() as usize).max(1);
        for j in 0..steps {
            let theta = (j as f64 + 0.5) / steps as f64 * std::f64::consts::TAU;
            if r <= boundary(theta) {
                out.points.push(from_polar(PolarPoint { r, theta }, params));
                out.labels.push(label);
            }
        }
        r += spacing;
    }
}

/// Ground-truth surface of a scene: every bounded plane sampled on the
/// polar grid, labeled with its instance id.
pub fn sample_scene_surface(scene: &crate::synth::SceneSpec, spacing: f64) -> SampledSurface {
    let mut out = SampledSurface::default();
    for plane in &scene.planes {
        let shape = plane.shape;
        sample_plane_surface(
            &plane.params,
            &move |theta| shape.radius_at(theta),
            spacing,
            plane.id,
            &mut out,
        );
    }
    out
}

/// Reports as CSV: a header row plus one value row.
pub fn write_geometry_csv(path: &Path, r: &GeometryReport) -> Result<(), MetricsError> {
    let mut out = String::from("comp,acc,recall,prec,f_score,threshold\n");
    writeln!(out, "{},{},{},{},{},{}", r.comp, r.acc, r.recall, r.prec, r.f_score, r.threshold)
        .expect("write");
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_segmentation_csv(path: &Path, r: &SegmentationReport) -> Result<(), MetricsError> {
    let mut out = String::from("voi,ri,sc\n");
    writeln!(out, "{},{},{}", r.voi, r.ri, r.sc).expect("write");
    std::fs::write(path, out)?;
    Ok(())
}

impl std::fmt::Display for GeometryReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "geometry (threshold {:.3}):", self.threshold)?;
        writeln!(f, "  comp    {:.5}", self.comp)?;
        writeln!(f, "  acc     {:.5}", self.acc)?;
        writeln!(f, "  recall  {:.5}", self.recall)?;
        writeln!(f, "  prec    {:.5}", self.prec)?;
        write!(f, "  f-score {:.5}", self.f_score)
    }
}

impl std::fmt::Display for SegmentationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "segmentation:")?;
        writeln!(f, "  voi {:.5}", self.voi)?;
        writeln!(f, "  ri  {:.5}", self.ri)?;
        write!(f, "  sc  {:.5}", self.sc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_surface(rng: &mut ChaCha8Rng, n: usize, clusters: u32) -> SampledSurface {
        SampledSurface {
            points: (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect(),
            labels: (0..n).map(|_| rng.random_range(0..clusters)).collect(),
        }
    }

    /// Brute-force nearest neighbor with the same tie rule.
    fn brute_nearest(q: Vec3, pts: &[Vec3]) -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        for (i, p) in pts.iter().enumerate() {
            let d2 = (*p - q).norm_squared();
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        (best.0, best.1.sqrt())
    }

    #[test]
    fn grid_nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let surface = random_surface(&mut rng, 400, 3);
        let grid = PointGrid::build(&surface.points);
        for _ in 0..500 {
            let q = Vec3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
            );
            let (gi, gd) = grid.nearest(q);
            let (bi, bd) = brute_nearest(q, &surface.points);
            assert_eq!(gi, bi);
            assert_eq!(gd, bd);
        }
    }

    #[test]
    fn identity_inputs_give_perfect_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_surface(&mut rng, 200, 4);
        let g = geometry_metrics(&s, &s, 0.05).unwrap();
        assert_eq!(g.acc, 0.0);
        assert_eq!(g.comp, 0.0);
        assert_eq!(g.prec, 1.0);
        assert_eq!(g.recall, 1.0);
        assert_eq!(g.f_score, 1.0);
        let seg = segmentation_metrics(&s.labels, &s.labels).unwrap();
        assert_eq!(seg.voi, 0.0);
        assert_eq!(seg.ri, 1.0);
        assert_eq!(seg.sc, 1.0);
    }

    #[test]
    fn uniform_normal_offset_gives_exact_distances() {
        // A planar patch translated along its normal by twice the
        // threshold: every nearest-neighbor distance is exactly 2 tau.
        let tau = 0.05;
        let mut gt = SampledSurface::default();
        for i in 0..20 {
            for j in 0..20 {
                gt.points.push(Vec3::new(i as f64 * 0.02, j as f64 * 0.02, 0.0));
                gt.labels.push(0);
            }
        }
        let pred = SampledSurface {
            points: gt.points.iter().map(|p| *p + Vec3::new(0.0, 0.0, 2.0 * tau)).collect(),
            labels: gt.labels.clone(),
        };
        let g = geometry_metrics(&pred, &gt, tau).unwrap();
        assert!((g.acc - 2.0 * tau).abs() < 1e-12);
        assert!((g.comp - 2.0 * tau).abs() < 1e-12);
        assert_eq!(g.prec, 0.0);
        assert_eq!(g.recall, 0.0);
        assert_eq!(g.f_score, 0.0);
    }

    #[test]
    fn subsampled_prediction_matches_brute_force_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt = random_surface(&mut rng, 300, 2);
        let keep: Vec<usize> = (0..300).filter(|_| rng.random_range(0..3) > 0).collect();
        let pred = SampledSurface {
            points: keep.iter().map(|&i| gt.points[i]).collect(),
            labels: keep.iter().map(|&i| gt.labels[i]).collect(),
        };
        let tau = 0.08;
        let g = geometry_metrics(&pred, &gt, tau).unwrap();
        assert_eq!(g.prec, 1.0);
        assert_eq!(g.acc, 0.0);
        assert!(g.recall < 1.0);
        // Full O(n^2) recomputation.
        let acc: f64 = pred.points.iter().map(|p| brute_nearest(*p, &gt.points).1).sum::<f64>()
            / pred.len() as f64;
        let comp: f64 = gt.points.iter().map(|p| brute_nearest(*p, &pred.points).1).sum::<f64>()
            / gt.len() as f64;
        let recall = gt
            .points
            .iter()
            .filter(|p| brute_nearest(**p, &pred.points).1 <= tau)
            .count() as f64
            / gt.len() as f64;
        assert_eq!(g.acc, acc);
        assert_eq!(g.comp, comp);
        assert_eq!(g.recall, recall);
    }

    #[test]
    fn transfer_identity_and_single_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = random_surface(&mut rng, 100, 5);
        let t = transfer_labels(&s, &s).unwrap();
        assert_eq!(t.labels, s.labels);

        let single = SampledSurface { points: vec![Vec3::ZERO], labels: vec![9] };
        let t = transfer_labels(&single, &s).unwrap();
        assert!(t.labels.iter().all(|&l| l == 9));
    }

    #[test]
    fn transfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let from = random_surface(&mut rng, 150, 6);
        let to = random_surface(&mut rng, 150, 1);
        let t = transfer_labels(&from, &to).unwrap();
        for (p, &l) in to.points.iter().zip(&t.labels) {
            let (bi, _) = brute_nearest(*p, &from.points);
            assert_eq!(l, from.labels[bi]);
        }
    }

    /// Exhaustive pair-enumeration oracle for RI and a from-scratch
    /// contingency recomputation for VOI/SC.
    fn oracle_metrics(a: &[u32], b: &[u32]) -> (f64, f64, f64) {
        let n = a.len();
        let mut agree = 0usize;
        let mut pairs = 0usize;
        for i in 0..n {
            for j in (i + 1)..n {
                pairs += 1;
                if (a[i] == a[j]) == (b[i] == b[j]) {
                    agree += 1;
                }
            }
        }
        let ri = if pairs == 0 { 1.0 } else { agree as f64 / pairs as f64 };

        let mut joint: HashMap<(u32, u32), f64> = HashMap::new();
        let mut pa: HashMap<u32, f64> = HashMap::new();
        let mut pb: HashMap<u32, f64> = HashMap::new();
        for (&x, &y) in a.iter().zip(b) {
            *joint.entry((x, y)).or_default() += 1.0;
            *pa.entry(x).or_default() += 1.0;
            *pb.entry(y).or_default() += 1.0;
        }
        let nf = n as f64;
        let ha: f64 = pa.values().map(|&s| -(s / nf) * (s / nf).ln()).sum();
        let hb: f64 = pb.values().map(|&s| -(s / nf) * (s / nf).ln()).sum();
        let mut mi = 0.0;
        for (&(x, y), &nij) in &joint {
            mi += nij / nf * ((nij / nf) / ((pa[&x] / nf) * (pb[&y] / nf))).ln();
        }
        let voi = (ha + hb - 2.0 * mi).max(0.0);

        let mut sc = 0.0;
        for (&x, &na) in &pa {
            let mut best = 0.0f64;
            for (&y, &nb) in &pb {
                let inter = joint.get(&(x, y)).copied().unwrap_or(0.0);
                if inter > 0.0 {
                    best = best.max(inter / (na + nb - inter));
                }
            }
            sc += na / nf * best;
        }
        (voi, ri, sc)
    }

    #[test]
    fn one_cluster_versus_singletons() {
        let a = vec![0u32, 0, 0, 0];
        let b = vec![0u32, 1, 2, 3];
        let seg = segmentation_metrics(&a, &b).unwrap();
        assert!((seg.voi - 4.0f64.ln()).abs() < 1e-12, "voi {}", seg.voi);
        let (voi_o, ri_o, sc_o) = oracle_metrics(&a, &b);
        assert!((seg.voi - voi_o).abs() < 1e-12);
        assert!((seg.ri - ri_o).abs() < 1e-12);
        assert!((seg.sc - sc_o).abs() < 1e-12);
    }

    #[test]
    fn random_partitions_match_contingency_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let n = 50;
            let a: Vec<u32> = (0..n).map(|_| rng.random_range(0..5)).collect();
            let b: Vec<u32> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let seg = segmentation_metrics(&a, &b).unwrap();
            let (voi_o, ri_o, sc_o) = oracle_metrics(&a, &b);
            assert!((seg.voi - voi_o).abs() < 1e-12);
            assert!((seg.ri - ri_o).abs() < 1e-12);
            assert!((seg.sc - sc_o).abs() < 1e-12);
        }
    }

    #[test]
    fn voi_and_ri_are_symmetric_and_rename_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..20 {
            let n = 60;
            let a: Vec<u32> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let b: Vec<u32> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let ab = segmentation_metrics(&a, &b).unwrap();
            let ba = segmentation_metrics(&b, &a).unwrap();
            assert!((ab.voi - ba.voi).abs() < 1e-12);
            assert!((ab.ri - ba.ri).abs() < 1e-12);
            // Rename labels on both sides.
            let a2: Vec<u32> = a.iter().map(|&l| 17 + 3 * l).collect();
            let b2: Vec<u32> = b.iter().map(|&l| 91 - 7 * l).collect();
            let renamed = segmentation_metrics(&a2, &b2).unwrap();
            assert!((ab.voi - renamed.voi).abs() < 1e-12);
            assert!((ab.ri - renamed.ri).abs() < 1e-12);
            assert!((ab.sc - renamed.sc).abs() < 1e-12);
        }
    }

    #[test]
    fn shrinking_threshold_never_raises_precision_or_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let gt = random_surface(&mut rng, 150, 2);
        let pred = random_surface(&mut rng, 120, 2);
        let mut last = (f64::INFINITY, f64::INFINITY);
        for tau in [0.5, 0.3, 0.2, 0.1, 0.05, 0.01] {
            let g = geometry_metrics(&pred, &gt, tau).unwrap();
            assert!(g.prec <= last.0 + 1e-15);
            assert!(g.recall <= last.1 + 1e-15);
            last = (g.prec, g.recall);
        }
    }

    #[test]
    fn empty_surfaces_are_rejected() {
        let s = SampledSurface { points: vec![Vec3::ZERO], labels: vec![0] };
        let empty = SampledSurface::default();
        assert!(matches!(geometry_metrics(&empty, &s, 0.1), Err(MetricsError::EmptySurface)));
        assert!(matches!(transfer_labels(&s, &empty), Err(MetricsError::EmptySurface)));
        assert!(matches!(
            segmentation_metrics(&[0], &[0, 1]),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn plane_sampler_respects_the_boundary_and_density() {
        let params = PlaneParams::from_center(
            Vec3::new(1.0, 2.0, 3.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(1.0, 0.0, 0.0),
        )
        .unwrap();
        let mut out = SampledSurface::default();
        sample_plane_surface(&params, &|_| 0.5, 0.02, 7, &mut out);
        // All points on the plane, inside the disk.
        for p in &out.points {
            assert!(params.signed_distance(*p).abs() < 1e-9);
            assert!((*p - params.center).norm() <= 0.5 + 1e-9);
        }
        assert!(out.labels.iter().all(|&l| l == 7));
        // About area / spacing^2 points.
        let expected = std::f64::consts::PI * 0.25 / (0.02 * 0.02);
        let ratio = out.len() as f64 / expected;
        assert!(ratio > 0.9 && ratio < 1.1, "sampled {} expected {expected:.0}", out.len());
    }
}
