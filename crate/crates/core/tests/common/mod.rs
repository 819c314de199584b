//! Shared harness for the acceptance suite: a lazily-built box-room
//! pipeline run plus the independent oracles the criteria compare against.

use std::sync::LazyLock;
use std::time::Instant;

use planedet_core::geometry::{PlaneParams, Ray};
use planedet_core::math::Vec3;
use planedet_core::metrics::{GeometryReport, SegmentationReport};
use planedet_core::pipeline::{cmd_eval, cmd_generate, cmd_reconstruct, PipelineConfig, Reconstruction};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct Box6Run {
    pub dir: tempfile::TempDir,
    pub config: PipelineConfig,
    pub recon: Reconstruction,
    pub geometry: GeometryReport,
    pub segmentation: SegmentationReport,
    pub generate_secs: f64,
    pub reconstruct_secs: f64,
    pub eval_secs: f64,
}

/// One full pipeline run on the default box-room configuration, shared by
/// the criteria that inspect its artifacts.
pub static BOX6: LazyLock<Box6Run> = LazyLock::new(|| {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = PipelineConfig::default();
    let t0 = Instant::now();
    cmd_generate(&config, dir.path()).expect("generate");
    let t1 = Instant::now();
    let recon = cmd_reconstruct(&config, dir.path()).expect("reconstruct");
    let t2 = Instant::now();
    let (geometry, segmentation) = cmd_eval(&config, dir.path(), false).expect("eval");
    let t3 = Instant::now();
    Box6Run {
        dir,
        config,
        recon,
        geometry,
        segmentation,
        generate_secs: (t1 - t0).as_secs_f64(),
        reconstruct_secs: (t2 - t1).as_secs_f64(),
        eval_secs: (t3 - t2).as_secs_f64(),
    }
});

pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    // Central differences with step 1e-5 bottom out near 1e-8.
    if denom < 1e-8 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

pub fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm() > 0.1 {
            return v.normalized().unwrap();
        }
    }
}

pub fn random_plane(rng: &mut ChaCha8Rng) -> PlaneParams {
    loop {
        let normal = random_unit(rng);
        let center = Vec3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        let helper = random_unit(rng);
        if let Some(axis) = (helper - normal * helper.dot(normal)).normalized() {
            return PlaneParams::from_center(center, normal, axis).unwrap();
        }
    }
}

/// Dense line-search oracle: the t in [0, 100] minimizing the plane-equation
/// residual, on a fixed grid.
pub fn line_search_t(ray: &Ray, plane: &PlaneParams, step: f64) -> f64 {
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

/// Exhaustive assignment oracle over all row permutations (rows >= cols).
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    fn heap(k: usize, perm: &mut Vec<usize>, cost: &[Vec<f64>], cols: usize, best: &mut f64) {
        if k == 1 {
            let total: f64 = (0..cols).map(|j| cost[perm[j]][j]).sum();
            if total < *best {
                *best = total;
            }
            return;
        }
        for i in 0..k {
            heap(k - 1, perm, cost, cols, best);
            if k % 2 == 0 {
                perm.swap(i, k - 1);
            } else {
                perm.swap(0, k - 1);
            }
        }
    }
    let mut best = f64::INFINITY;
    let mut perm: Vec<usize> = (0..cost.len()).collect();
    heap(cost.len(), &mut perm, cost, cost[0].len(), &mut best);
    best
}

/// From-scratch partition metrics: pair enumeration for RI, a fresh
/// contingency table for VOI and SC.
pub fn oracle_partition_metrics(a: &[u32], b: &[u32]) -> (f64, f64, f64) {
    use std::collections::HashMap;
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
