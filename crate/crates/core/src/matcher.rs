//! Plane instances from embeddings: soft masks as query/voxel dot products,
//! optimal bipartite matching against ground-truth segments, the
//! mask-classification loss, and aggregation of per-voxel predictions into
//! plane parameters.
//!
//! The learned networks that would produce the embeddings are out of scope;
//! [`EmbeddingProvider`] abstracts them and [`OracleEmbeddingProvider`]
//! derives embeddings from ground truth (noisy one-hots) so the decoding,
//! matching, and loss machinery can be exercised end to end.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{primary_axis, GeometryError, PlaneParams};
use crate::math::Vec3;
use crate::par;
use crate::synth::{GtVoxelization, SceneSpec};

/// Embedding dimension of the oracle provider (one-hot capacity).
pub const EMBED_DIM: usize = 16;

/// Probabilities are clamped to this floor before taking logs so matching
/// costs stay finite.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("embedding dimension mismatch: queries {queries}, voxels {voxels}")]
    EmbeddingDim { queries: usize, voxels: usize },
    #[error("voxel embedding arrays disagree in length")]
    VoxelArrays,
    #[error("cost matrix contains a non-finite entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("need at least as many rows as columns ({rows} rows, {cols} cols)")]
    NotEnoughRows { rows: usize, cols: usize },
    #[error("instance has {0} voxels; aggregation needs at least 3")]
    TooFewVoxels(usize),
    #[error("member normals cancel out; no aggregate normal")]
    DegenerateNormal,
    #[error("ground-truth masks must share the occupied-voxel domain")]
    GtMaskLength,
    #[error("more ground-truth segments ({gt}) than predictions ({predictions})")]
    TooFewPredictions { predictions: usize, gt: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Occupied voxels with their embeddings and per-voxel plane predictions.
#[derive(Clone, Debug)]
pub struct VoxelEmbeddings {
    pub origin: Vec3,
    pub voxel_size: f64,
    /// Sorted occupied voxel coordinates; the mask domain.
    pub coords: Vec<[i32; 3]>,
    pub embeddings: Vec<Vec<f64>>,
    /// Per-voxel predicted unit normal.
    pub normals: Vec<Vec3>,
    /// Per-voxel predicted plane offset.
    pub offsets: Vec<f64>,
    /// Per-voxel predicted plane center (the shifted voxel).
    pub centers: Vec<Vec3>,
}

impl VoxelEmbeddings {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn position(&self, i: usize) -> Vec3 {
        self.origin
            + Vec3::new(
                (self.coords[i][0] as f64 + 0.5) * self.voxel_size,
                (self.coords[i][1] as f64 + 0.5) * self.voxel_size,
                (self.coords[i][2] as f64 + 0.5) * self.voxel_size,
            )
    }

    pub fn validate(&self) -> Result<(), MatchError> {
        let n = self.coords.len();
        if self.embeddings.len() != n
            || self.normals.len() != n
            || self.offsets.len() != n
            || self.centers.len() != n
        {
            return Err(MatchError::VoxelArrays);
        }
        for nrm in &self.normals {
            if (nrm.norm() - 1.0).abs() > 1e-6 {
                return Err(MatchError::VoxelArrays);
            }
        }
        Ok(())
    }
}

/// Detection/tracking queries: embeddings plus class logits over
/// {plane, no-object}.
#[derive(Clone, Debug)]
pub struct QuerySet {
    pub embeddings: Vec<Vec<f64>>,
    /// `[real, null]` logits per query.
    pub class_logits: Vec<[f64; 2]>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    /// Softmax over the two class logits.
    pub fn class_probs(&self, q: usize) -> [f64; 2] {
        let [a, b] = self.class_logits[q];
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        [ea / (ea + eb), eb / (ea + eb)]
    }

    /// True when the argmax class is the real (plane) class.
    pub fn is_real(&self, q: usize) -> bool {
        self.class_logits[q][0] >= self.class_logits[q][1]
    }

    pub fn concat(&self, other: &QuerySet) -> QuerySet {
        let mut embeddings = self.embeddings.clone();
        embeddings.extend(other.embeddings.iter().cloned());
        let mut class_logits = self.class_logits.clone();
        class_logits.extend(other.class_logits.iter().cloned());
        QuerySet { embeddings, class_logits }
    }
}

/// One decoded instance over the fragment's occupied voxels.
#[derive(Clone, Debug)]
pub struct InstancePrediction {
    pub query_index: usize,
    /// `[p(real), p(null)]`.
    pub class_probs: [f64; 2],
    /// `sigmoid(query . embedding)` per occupied voxel.
    pub soft_mask: Vec<f64>,
    /// Thresholded at tau_mask and overlap-resolved (disjoint across
    /// instances).
    pub binary_mask: Vec<bool>,
    /// Indices of member voxels (the true entries of `binary_mask`).
    pub voxel_indices: Vec<usize>,
    /// Aggregated plane parameters, once [`aggregate_plane`] ran.
    pub params: Option<PlaneParams>,
}

/// Ground-truth segments over the same occupied-voxel domain.
#[derive(Clone, Debug)]
pub struct GtSegment {
    /// Ground-truth class (0 is the single real class).
    pub class_id: usize,
    pub mask: Vec<bool>,
    pub params: PlaneParams,
}

#[derive(Clone, Debug, Default)]
pub struct GtSegmentSet {
    pub segments: Vec<GtSegment>,
}

impl GtSegmentSet {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn validate(&self, domain: usize) -> Result<(), MatchError> {
        let mut seen = vec![false; domain];
        for s in &self.segments {
            if s.mask.len() != domain {
                return Err(MatchError::GtMaskLength);
            }
            for (i, &m) in s.mask.iter().enumerate() {
                if m {
                    if seen[i] {
                        return Err(MatchError::GtMaskLength);
                    }
                    seen[i] = true;
                }
            }
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Decode plane instances: soft mask = sigmoid of the query/voxel dot
/// product, binary at `tau_mask`, overlaps resolved by assigning each voxel
/// to its highest-soft-mask real query (ties to the lower query index).
/// Null-class queries emit no instance.
pub fn decode_masks(
    voxels: &VoxelEmbeddings,
    queries: &QuerySet,
    tau_mask: f64,
) -> Result<Vec<InstancePrediction>, MatchError> {
    voxels.validate()?;
    for (q, e) in queries.embeddings.iter().enumerate() {
        if let Some(v) = voxels.embeddings.first() {
            if e.len() != v.len() {
                return Err(MatchError::EmbeddingDim { queries: e.len(), voxels: v.len() });
            }
        }
        let _ = q;
    }

    let real_queries: Vec<usize> = (0..queries.len()).filter(|&q| queries.is_real(q)).collect();
    let soft: Vec<Vec<f64>> = par::map_slice(&real_queries, |&q| {
        let qe = &queries.embeddings[q];
        voxels
            .embeddings
            .iter()
            .map(|ve| sigmoid(qe.iter().zip(ve).map(|(a, b)| a * b).sum()))
            .collect()
    });

    // Overlap resolution: each voxel goes to the best real query whose
    // thresholded mask contains it.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); real_queries.len()];
    for v in 0..voxels.len() {
        let mut best: Option<(usize, f64)> = None;
        for (k, row) in soft.iter().enumerate() {
            let s = row[v];
            if s >= tau_mask {
                let better = match best {
                    None => true,
                    Some((_, bs)) => s > bs,
                };
                if better {
                    best = Some((k, s));
                }
            }
        }
        if let Some((k, _)) = best {
            members[k].push(v);
        }
    }

    Ok(real_queries
        .iter()
        .zip(soft)
        .zip(members)
        .map(|((&q, soft_mask), voxel_indices)| {
            let mut binary_mask = vec![false; voxels.len()];
            for &v in &voxel_indices {
                binary_mask[v] = true;
            }
            InstancePrediction {
                query_index: q,
                class_probs: queries.class_probs(q),
                soft_mask,
                binary_mask,
                voxel_indices,
                params: None,
            }
        })
        .collect())
}

/// Minimum-cost one-to-one assignment of every column to a distinct row
/// (`rows >= cols`). Returns the row chosen for each column and the total
/// cost. Shortest-augmenting-path method with potentials.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64), MatchError> {
    let rows = cost.len();
    let cols = cost.first().map(|r| r.len()).unwrap_or(0);
    if cols == 0 {
        return Ok((Vec::new(), 0.0));
    }
    for (i, r) in cost.iter().enumerate() {
        for (j, c) in r.iter().enumerate() {
            if !c.is_finite() {
                return Err(MatchError::NonFiniteCost { row: i, col: j });
            }
        }
    }
    if rows < cols {
        return Err(MatchError::NotEnoughRows { rows, cols });
    }

    // 1-indexed arrays; p[i] is the column assigned to row i.
    let mut u = vec![0.0f64; cols + 1];
    let mut v = vec![0.0f64; rows + 1];
    let mut p = vec![0usize; rows + 1];
    let mut way = vec![0usize; rows + 1];
    for j in 1..=cols {
        p[0] = j;
        let mut i0 = 0usize;
        let mut minv = vec![f64::INFINITY; rows + 1];
        let mut used = vec![false; rows + 1];
        loop {
            used[i0] = true;
            let j0 = p[i0];
            let mut delta = f64::INFINITY;
            let mut i1 = 0usize;
            for i in 1..=rows {
                if used[i] {
                    continue;
                }
                let cur = cost[i - 1][j0 - 1] - u[j0] - v[i];
                if cur < minv[i] {
                    minv[i] = cur;
                    way[i] = i0;
                }
                if minv[i] < delta {
                    delta = minv[i];
                    i1 = i;
                }
            }
            for i in 0..=rows {
                if used[i] {
                    u[p[i]] += delta;
                    v[i] -= delta;
                } else {
                    minv[i] -= delta;
                }
            }
            i0 = i1;
            if p[i0] == 0 {
                break;
            }
        }
        loop {
            let i1 = way[i0];
            p[i0] = p[i1];
            i0 = i1;
            if i0 == 0 {
                break;
            }
        }
    }

    let mut col_to_row = vec![usize::MAX; cols];
    for i in 1..=rows {
        if p[i] != 0 {
            col_to_row[p[i] - 1] = i - 1;
        }
    }
    let total = col_to_row.iter().enumerate().map(|(j, &i)| cost[i][j]).sum();
    Ok((col_to_row, total))
}

/// Binary cross-entropy (mean over the voxel domain) plus Dice loss of a
/// soft mask against a binary target, equal weights.
pub fn mask_loss(soft: &[f64], target: &[bool]) -> f64 {
    assert_eq!(soft.len(), target.len());
    let n = soft.len().max(1) as f64;
    let mut bce = 0.0;
    let mut inter = 0.0;
    let mut s_sum = 0.0;
    let mut t_sum = 0.0;
    for (&s, &t) in soft.iter().zip(target) {
        let sc = s.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        bce -= if t { sc.ln() } else { (1.0 - sc).ln() };
        if t {
            inter += s;
            t_sum += 1.0;
        }
        s_sum += s;
    }
    let dice = 1.0 - 2.0 * inter / (s_sum + t_sum).max(PROB_FLOOR);
    bce / n + dice
}

/// The mask-classification loss: predictions matched one-to-one to
/// ground-truth segments (padded with no-object), matched queries pay the
/// class negative log-likelihood plus the mask loss, unmatched queries pay
/// the no-object negative log-likelihood. Matching minimizes
/// `-p(class) + mask_loss` via [`hungarian`]. Returns the loss and the
/// matched `(query, gt)` pairs.
pub fn mask_cls_loss(
    predictions: &[InstancePrediction],
    gt: &GtSegmentSet,
) -> Result<(f64, Vec<(usize, usize)>), MatchError> {
    let n = predictions.len();
    let m = gt.len();
    if n < m {
        return Err(MatchError::TooFewPredictions { predictions: n, gt: m });
    }
    if let Some(first) = predictions.first() {
        gt.validate(first.soft_mask.len())?;
    }

    let cost: Vec<Vec<f64>> = predictions
        .iter()
        .map(|pred| {
            gt.segments
                .iter()
                .map(|seg| {
                    // Single real class: p(c^gt) is the real-class probability.
                    let p_cls = pred.class_probs[0].clamp(PROB_FLOOR, 1.0);
                    -p_cls + mask_loss(&pred.soft_mask, &seg.mask)
                })
                .collect()
        })
        .collect();
    let (col_to_row, _) = hungarian(&cost)?;

    let mut matched_of_query = vec![None; n];
    for (g, &q) in col_to_row.iter().enumerate() {
        matched_of_query[q] = Some(g);
    }
    let mut loss = 0.0;
    for (q, pred) in predictions.iter().enumerate() {
        match matched_of_query[q] {
            Some(g) => {
                let p_cls = pred.class_probs[0].clamp(PROB_FLOOR, 1.0);
                loss += -p_cls.ln() + mask_loss(&pred.soft_mask, &gt.segments[g].mask);
            }
            None => {
                let p_null = pred.class_probs[1].clamp(PROB_FLOOR, 1.0);
                loss += -p_null.ln();
            }
        }
    }
    let pairs = col_to_row.iter().enumerate().map(|(g, &q)| (q, g)).collect();
    Ok((loss, pairs))
}

/// Aggregate per-voxel predictions into plane parameters: normal is the
/// normalized mean of member normals, center the mean of member centers,
/// offset `-center . normal`, and the primary axis comes from PCA of the
/// member voxel positions.
pub fn aggregate_parts(
    normals: &[Vec3],
    centers: &[Vec3],
    positions: &[Vec3],
) -> Result<PlaneParams, MatchError> {
    if normals.len() < 3 {
        return Err(MatchError::TooFewVoxels(normals.len()));
    }
    let mut normal_sum = Vec3::ZERO;
    let mut center_sum = Vec3::ZERO;
    for (n, c) in normals.iter().zip(centers) {
        normal_sum += *n;
        center_sum += *c;
    }
    let normal = normal_sum / normals.len() as f64;
    if normal.norm() < 1e-6 {
        return Err(MatchError::DegenerateNormal);
    }
    let normal = normal.normalized().expect("norm checked above");
    let center = center_sum / centers.len() as f64;
    let axis = primary_axis(positions, normal)?;
    Ok(PlaneParams::new(normal, -center.dot(normal), center, axis)?)
}

/// [`aggregate_parts`] over the members of an instance mask.
pub fn aggregate_plane(
    member_indices: &[usize],
    voxels: &VoxelEmbeddings,
) -> Result<PlaneParams, MatchError> {
    let normals: Vec<Vec3> = member_indices.iter().map(|&i| voxels.normals[i]).collect();
    let centers: Vec<Vec3> = member_indices.iter().map(|&i| voxels.centers[i]).collect();
    let positions: Vec<Vec3> = member_indices.iter().map(|&i| voxels.position(i)).collect();
    aggregate_parts(&normals, &centers, &positions)
}

/// Source of embeddings standing in for the learned networks.
pub trait EmbeddingProvider {
    /// Produce voxel embeddings (for exactly the given occupied coords) and
    /// the fragment's detection queries.
    fn provide(
        &self,
        fragment_index: usize,
        coords: &[[i32; 3]],
        origin: Vec3,
        voxel_size: f64,
    ) -> Result<FragmentEmbeddings, MatchError>;
}

/// Output of an [`EmbeddingProvider`] for one fragment.
#[derive(Clone, Debug)]
pub struct FragmentEmbeddings {
    pub voxels: VoxelEmbeddings,
    pub detection_queries: QuerySet,
    /// Which ground-truth instance each detection query encodes, when the
    /// provider knows (diagnostics only; the pipeline must not use this).
    pub query_instances: Vec<Option<u32>>,
}

/// Ground-truth-backed provider: voxel embedding = one-hot of the owning
/// instance plus Gaussian noise; detection queries are scaled clean
/// one-hots of the instances present in the fragment; per-voxel plane
/// parameters come from the owning (or nearest) plane, with optional
/// angular jitter on the normals.
#[derive(Clone, Debug)]
pub struct OracleEmbeddingProvider {
    pub scene: SceneSpec,
    pub gt: GtVoxelization,
    /// Std of the Gaussian embedding noise.
    pub sigma: f64,
    /// Angular jitter of per-voxel normals, degrees.
    pub normal_jitter_deg: f64,
    /// Scale of the clean one-hot detection queries.
    pub query_scale: f64,
    /// Extra no-object queries appended after the real ones.
    pub null_queries: usize,
    pub seed: u64,
}

impl OracleEmbeddingProvider {
    pub fn new(scene: SceneSpec, gt: GtVoxelization, sigma: f64, seed: u64) -> Self {
        OracleEmbeddingProvider {
            scene,
            gt,
            sigma,
            normal_jitter_deg: 0.0,
            query_scale: 10.0,
            null_queries: 2,
            seed,
        }
    }
}

impl EmbeddingProvider for OracleEmbeddingProvider {
    fn provide(
        &self,
        fragment_index: usize,
        coords: &[[i32; 3]],
        origin: Vec3,
        voxel_size: f64,
    ) -> Result<FragmentEmbeddings, MatchError> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(fragment_index as u64 + 1)));
        let noise = Normal::new(0.0, self.sigma.max(0.0)).expect("sigma >= 0");
        let jitter = Normal::new(0.0, self.normal_jitter_deg.to_radians().max(0.0))
            .expect("jitter >= 0");

        let label_of: BTreeMap<[i32; 3], u32> =
            self.gt.voxels.iter().map(|v| (v.coord, v.instance)).collect();

        let mut embeddings = Vec::with_capacity(coords.len());
        let mut normals = Vec::with_capacity(coords.len());
        let mut offsets = Vec::with_capacity(coords.len());
        let mut centers = Vec::with_capacity(coords.len());
        let mut present: BTreeMap<u32, usize> = BTreeMap::new();

        for coord in coords {
            let center = origin
                + Vec3::new(
                    (coord[0] as f64 + 0.5) * voxel_size,
                    (coord[1] as f64 + 0.5) * voxel_size,
                    (coord[2] as f64 + 0.5) * voxel_size,
                );
            let label = label_of.get(coord).copied();
            let plane = match label {
                Some(id) => {
                    *present.entry(id).or_insert(0) += 1;
                    self.scene.planes.iter().find(|p| p.id == id).expect("gt instance exists")
                }
                None => {
                    // Unlabeled occupied voxel: nearest plane's parameters,
                    // noise-only embedding.
                    self.scene
                        .planes
                        .iter()
                        .min_by(|a, b| {
                            a.distance_to_region(center)
                                .partial_cmp(&b.distance_to_region(center))
                                .unwrap()
                        })
                        .expect("scene has planes")
                }
            };
            let mut e = vec![0.0; EMBED_DIM];
            if let Some(id) = label {
                e[id as usize % EMBED_DIM] = 1.0;
            }
            for x in &mut e {
                *x += noise.sample(&mut rng);
            }
            embeddings.push(e);

            let n = if self.normal_jitter_deg > 0.0 {
                let axis_hint =
                    if plane.params.normal.x.abs() < 0.9 { Vec3::new(1.0, 0.0, 0.0) } else { Vec3::new(0.0, 1.0, 0.0) };
                let t1 = plane.params.normal.cross(axis_hint).normalized().expect("tangent");
                let t2 = plane.params.normal.cross(t1);
                (plane.params.normal + t1 * jitter.sample(&mut rng) + t2 * jitter.sample(&mut rng))
                    .normalized()
                    .expect("jittered normal")
            } else {
                plane.params.normal
            };
            normals.push(n);
            offsets.push(plane.params.offset);
            centers.push(plane.params.center);
        }

        let mut query_embeddings = Vec::new();
        let mut class_logits = Vec::new();
        let mut query_instances = Vec::new();
        for (&id, _) in &present {
            let mut e = vec![0.0; EMBED_DIM];
            e[id as usize % EMBED_DIM] = self.query_scale;
            query_embeddings.push(e);
            class_logits.push([4.0, -4.0]);
            query_instances.push(Some(id));
        }
        for _ in 0..self.null_queries {
            query_embeddings.push(vec![0.0; EMBED_DIM]);
            class_logits.push([-4.0, 4.0]);
            query_instances.push(None);
        }

        let voxels = VoxelEmbeddings {
            origin,
            voxel_size,
            coords: coords.to_vec(),
            embeddings,
            normals,
            offsets,
            centers,
        };
        voxels.validate()?;
        Ok(FragmentEmbeddings {
            voxels,
            detection_queries: QuerySet { embeddings: query_embeddings, class_logits },
            query_instances,
        })
    }
}

/// Line-oriented instance dump:
/// `query_index class voxel_count nx ny nz d cx cy cz ax ay az` (plane
/// fields are `-` when not aggregated).
pub fn write_instance_dump(path: &Path, instances: &[InstancePrediction]) -> Result<(), MatchError> {
    let mut out = String::new();
    for inst in instances {
        let class = if inst.class_probs[0] >= inst.class_probs[1] { "plane" } else { "null" };
        write!(out, "{} {} {}", inst.query_index, class, inst.voxel_indices.len()).expect("write");
        match &inst.params {
            Some(p) => writeln!(
                out,
                " {} {} {} {} {} {} {} {} {} {}",
                p.normal.x, p.normal.y, p.normal.z, p.offset,
                p.center.x, p.center.y, p.center.z,
                p.axis.x, p.axis.y, p.axis.z
            )
            .expect("write"),
            None => writeln!(out, " -").expect("write"),
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_scene, voxelize_gt};

    fn flat_voxels(n: usize, dim: usize) -> VoxelEmbeddings {
        VoxelEmbeddings {
            origin: Vec3::ZERO,
            voxel_size: 0.1,
            coords: (0..n).map(|i| [i as i32, 0, 0]).collect(),
            embeddings: vec![vec![0.0; dim]; n],
            normals: vec![Vec3::new(0.0, 0.0, 1.0); n],
            offsets: vec![0.0; n],
            centers: vec![Vec3::ZERO; n],
        }
    }

    #[test]
    fn aligned_embedding_saturates_soft_mask() {
        let mut voxels = flat_voxels(4, 4);
        voxels.embeddings[1] = vec![0.0, 1.0, 0.0, 0.0];
        let queries = QuerySet {
            embeddings: vec![vec![0.0, 10.0, 0.0, 0.0]],
            class_logits: vec![[4.0, -4.0]],
        };
        let preds = decode_masks(&voxels, &queries, 0.5).unwrap();
        assert_eq!(preds.len(), 1);
        assert!(preds[0].soft_mask[1] > 0.9999);
        for v in [0, 2, 3] {
            assert_eq!(preds[0].soft_mask[v], 0.5);
        }
    }

    #[test]
    fn all_zero_embeddings_give_exactly_half() {
        let voxels = flat_voxels(5, 3);
        let queries = QuerySet {
            embeddings: vec![vec![0.0; 3], vec![0.0; 3]],
            class_logits: vec![[4.0, -4.0], [4.0, -4.0]],
        };
        let preds = decode_masks(&voxels, &queries, 0.5).unwrap();
        for p in &preds {
            assert!(p.soft_mask.iter().all(|&s| s == 0.5));
        }
    }

    #[test]
    fn null_class_queries_emit_no_instance() {
        let voxels = flat_voxels(3, 2);
        let queries = QuerySet {
            embeddings: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            class_logits: vec![[4.0, -4.0], [-4.0, 4.0]],
        };
        let preds = decode_masks(&voxels, &queries, 0.5).unwrap();
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].query_index, 0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let voxels = flat_voxels(3, 4);
        let queries = QuerySet { embeddings: vec![vec![0.0; 5]], class_logits: vec![[4.0, -4.0]] };
        assert!(matches!(
            decode_masks(&voxels, &queries, 0.5),
            Err(MatchError::EmbeddingDim { .. })
        ));
    }

    #[test]
    fn resolution_keeps_masks_disjoint() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut voxels = flat_voxels(200, 8);
        for e in &mut voxels.embeddings {
            for x in e.iter_mut() {
                *x = rng.random_range(-1.0..1.0);
            }
        }
        let queries = QuerySet {
            embeddings: (0..5)
                .map(|_| (0..8).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect(),
            class_logits: vec![[4.0, -4.0]; 5],
        };
        let preds = decode_masks(&voxels, &queries, 0.5).unwrap();
        let mut claimed = vec![0usize; 200];
        for p in &preds {
            for &v in &p.voxel_indices {
                claimed[v] += 1;
            }
        }
        assert!(claimed.iter().all(|&c| c <= 1));
    }

    /// Oracle embeddings over the box room: decoded masks recover the
    /// ground-truth instance masks almost exactly.
    #[test]
    fn oracle_decoding_reaches_high_iou() {
        let scene = build_scene("box6", 11, 16).unwrap();
        let gt = voxelize_gt(&scene, 0.08);
        let provider = OracleEmbeddingProvider::new(scene, gt.clone(), 0.1, 77);
        let coords: Vec<[i32; 3]> = gt.voxels.iter().map(|v| v.coord).collect();
        let frag = provider.provide(0, &coords, gt.origin, gt.voxel_size).unwrap();
        let preds = decode_masks(&frag.voxels, &frag.detection_queries, 0.5).unwrap();
        let real_preds: Vec<_> = preds.iter().filter(|p| !p.voxel_indices.is_empty()).collect();
        assert_eq!(real_preds.len(), 6);
        for (k, pred) in real_preds.iter().enumerate() {
            let gid = frag.query_instances[pred.query_index].unwrap();
            let gt_mask: Vec<bool> =
                gt.voxels.iter().map(|v| v.instance == gid).collect();
            let inter = pred
                .binary_mask
                .iter()
                .zip(&gt_mask)
                .filter(|(a, b)| **a && **b)
                .count();
            let union = pred
                .binary_mask
                .iter()
                .zip(&gt_mask)
                .filter(|(a, b)| **a || **b)
                .count();
            let iou = inter as f64 / union as f64;
            assert!(iou >= 0.95, "instance {k} IoU {iou}");
        }
    }

    #[test]
    fn hungarian_diagonal_dominance() {
        let cost = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        let (assign, total) = hungarian(&cost).unwrap();
        assert_eq!(assign, vec![0, 1]);
        assert_eq!(total, 2.0);
    }

    #[test]
    fn hungarian_zero_cost_perfect_matching() {
        let n = 6;
        let mut cost = vec![vec![3.0; n]; n];
        // One zero per row, shuffled diagonal.
        for i in 0..n {
            cost[i][(i * 5 + 2) % n] = 0.0;
        }
        let (_, total) = hungarian(&cost).unwrap();
        assert_eq!(total, 0.0);
    }

    #[test]
    fn hungarian_rejects_bad_input() {
        assert!(matches!(
            hungarian(&[vec![1.0, f64::NAN]]),
            Err(MatchError::NonFiniteCost { .. })
        ));
        assert!(matches!(
            hungarian(&[vec![1.0, 2.0]]),
            Err(MatchError::NotEnoughRows { .. })
        ));
    }

    fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
        let rows = cost.len();
        let cols = cost[0].len();
        let mut best = f64::INFINITY;
        let mut perm: Vec<usize> = (0..rows).collect();
        // Heap's algorithm over row permutations; first `cols` rows pay.
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
        heap(rows, &mut perm, cost, cols, &mut best);
        best
    }

    #[test]
    fn hungarian_matches_exhaustive_search() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let cost: Vec<Vec<f64>> = (0..7)
                .map(|_| (0..7).map(|_| rng.random_range(0.0..10.0)).collect())
                .collect();
            let (_, total) = hungarian(&cost).unwrap();
            let oracle = brute_force_assignment(&cost);
            assert_eq!(total, oracle, "hungarian {total} vs brute force {oracle}");
        }
    }

    #[test]
    fn hungarian_cost_invariant_under_permutation() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let cost: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..5).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let (_, base) = hungarian(&cost).unwrap();
            // Row shuffle.
            let mut rows = cost.clone();
            rows.swap(0, 3);
            rows.swap(1, 4);
            let (_, t1) = hungarian(&rows).unwrap();
            // Column shuffle.
            let cols: Vec<Vec<f64>> = cost
                .iter()
                .map(|r| {
                    let mut r = r.clone();
                    r.swap(0, 2);
                    r.swap(1, 4);
                    r
                })
                .collect();
            let (_, t2) = hungarian(&cols).unwrap();
            assert!((base - t1).abs() < 1e-12);
            assert!((base - t2).abs() < 1e-12);
        }
    }

    fn perfect_prediction(mask: &[bool]) -> InstancePrediction {
        InstancePrediction {
            query_index: 0,
            class_probs: [1.0, 0.0],
            soft_mask: mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
            binary_mask: mask.to_vec(),
            voxel_indices: mask
                .iter()
                .enumerate()
                .filter_map(|(i, &m)| m.then_some(i))
                .collect(),
            params: None,
        }
    }

    fn unit_plane() -> PlaneParams {
        PlaneParams::from_center(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 0.0))
            .unwrap()
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mask = vec![true, true, false, false, true, false];
        let gt = GtSegmentSet {
            segments: vec![GtSegment { class_id: 0, mask: mask.clone(), params: unit_plane() }],
        };
        let pred = perfect_prediction(&mask);
        let (loss, pairs) = mask_cls_loss(&[pred], &gt).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
        assert_eq!(pairs, vec![(0, 0)]);
    }

    #[test]
    fn half_confidence_single_term() {
        let mask = vec![true, false, true];
        let gt = GtSegmentSet {
            segments: vec![GtSegment { class_id: 0, mask: mask.clone(), params: unit_plane() }],
        };
        let mut pred = perfect_prediction(&mask);
        pred.class_probs = [0.5, 0.5];
        let (loss, _) = mask_cls_loss(&[pred], &gt).unwrap();
        // Mask term is ~0; the class term is -ln(0.5).
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9, "loss {loss}");
    }

    /// Exhaustive-matching oracle: enumerate every injective assignment of
    /// ground-truth segments to queries, pick the one minimizing the
    /// matching cost, evaluate the full loss under it.
    fn exhaustive_loss(preds: &[InstancePrediction], gt: &GtSegmentSet) -> f64 {
        let n = preds.len();
        let m = gt.len();
        let mut best_cost = f64::INFINITY;
        let mut best_assign: Vec<usize> = Vec::new();
        let mut queries: Vec<usize> = (0..n).collect();
        fn permutations(k: usize, arr: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if k == 1 {
                out.push(arr.clone());
                return;
            }
            for i in 0..k {
                permutations(k - 1, arr, out);
                if k % 2 == 0 {
                    arr.swap(i, k - 1);
                } else {
                    arr.swap(0, k - 1);
                }
            }
        }
        let mut perms = Vec::new();
        permutations(n, &mut queries, &mut perms);
        for p in perms {
            let assign: Vec<usize> = p[..m].to_vec();
            let mut cost = 0.0;
            for (g, &q) in assign.iter().enumerate() {
                let p_cls = preds[q].class_probs[0].clamp(PROB_FLOOR, 1.0);
                cost += -p_cls + mask_loss(&preds[q].soft_mask, &gt.segments[g].mask);
            }
            if cost < best_cost {
                best_cost = cost;
                best_assign = assign;
            }
        }
        let mut loss = 0.0;
        for (q, pred) in preds.iter().enumerate() {
            match best_assign.iter().position(|&qq| qq == q) {
                Some(g) => {
                    let p_cls = pred.class_probs[0].clamp(PROB_FLOOR, 1.0);
                    loss += -p_cls.ln() + mask_loss(&pred.soft_mask, &gt.segments[g].mask);
                }
                None => loss += -pred.class_probs[1].clamp(PROB_FLOOR, 1.0).ln(),
            }
        }
        loss
    }

    #[test]
    fn loss_matches_exhaustive_matching_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let domain = 12;
            let preds: Vec<InstancePrediction> = (0..3)
                .map(|q| {
                    let p_real: f64 = rng.random_range(0.05..0.95);
                    InstancePrediction {
                        query_index: q,
                        class_probs: [p_real, 1.0 - p_real],
                        soft_mask: (0..domain).map(|_| rng.random_range(0.01..0.99)).collect(),
                        binary_mask: vec![false; domain],
                        voxel_indices: vec![],
                        params: None,
                    }
                })
                .collect();
            // Two disjoint random gt masks.
            let mut m1 = vec![false; domain];
            let mut m2 = vec![false; domain];
            for i in 0..domain {
                match rng.random_range(0..3) {
                    0 => m1[i] = true,
                    1 => m2[i] = true,
                    _ => {}
                }
            }
            if !m1.iter().any(|&b| b) {
                m1[0] = true;
                m2[0] = false;
            }
            if !m2.iter().any(|&b| b) {
                m2[1] = true;
                m1[1] = false;
            }
            let gt = GtSegmentSet {
                segments: vec![
                    GtSegment { class_id: 0, mask: m1, params: unit_plane() },
                    GtSegment { class_id: 0, mask: m2, params: unit_plane() },
                ],
            };
            let (loss, _) = mask_cls_loss(&preds, &gt).unwrap();
            let oracle = exhaustive_loss(&preds, &gt);
            assert!((loss - oracle).abs() < 1e-12, "loss {loss} vs oracle {oracle}");
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn loss_decreases_toward_the_target_mask() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..20 {
            let domain = 30;
            let target: Vec<bool> = (0..domain).map(|_| rng.random_range(0..2) == 0).collect();
            let start: Vec<f64> = (0..domain).map(|_| rng.random_range(0.05..0.95)).collect();
            let gt = GtSegmentSet {
                segments: vec![GtSegment {
                    class_id: 0,
                    mask: target.clone(),
                    params: unit_plane(),
                }],
            };
            let mut last = f64::INFINITY;
            for step in 0..=10 {
                let t = step as f64 / 10.0;
                let soft: Vec<f64> = start
                    .iter()
                    .zip(&target)
                    .map(|(&s, &m)| (1.0 - t) * s + t * if m { 1.0 } else { 0.0 })
                    .collect();
                let pred = InstancePrediction {
                    query_index: 0,
                    class_probs: [0.9, 0.1],
                    soft_mask: soft,
                    binary_mask: vec![false; domain],
                    voxel_indices: vec![],
                    params: None,
                };
                let (loss, _) = mask_cls_loss(&[pred], &gt).unwrap();
                assert!(loss <= last + 1e-12, "loss rose from {last} to {loss} at t={t}");
                last = loss;
            }
        }
    }

    #[test]
    fn aggregate_unanimous_voxels() {
        let mut voxels = flat_voxels(5, 2);
        for c in &mut voxels.centers {
            *c = Vec3::new(0.0, 0.0, 5.0);
        }
        let params = aggregate_plane(&[0, 1, 2, 3, 4], &voxels).unwrap();
        assert!((params.normal - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        assert!((params.offset + 5.0).abs() < 1e-12);
        params.validate().unwrap();
    }

    #[test]
    fn aggregate_antipodal_normals_degenerate() {
        let mut voxels = flat_voxels(4, 2);
        voxels.normals[0] = Vec3::new(0.0, 0.0, 1.0);
        voxels.normals[1] = Vec3::new(0.0, 0.0, -1.0);
        voxels.normals[2] = Vec3::new(0.0, 0.0, 1.0);
        voxels.normals[3] = Vec3::new(0.0, 0.0, -1.0);
        assert!(matches!(
            aggregate_plane(&[0, 1, 2, 3], &voxels),
            Err(MatchError::DegenerateNormal)
        ));
    }

    #[test]
    fn aggregate_too_few_voxels() {
        let voxels = flat_voxels(2, 2);
        assert!(matches!(aggregate_plane(&[0, 1], &voxels), Err(MatchError::TooFewVoxels(2))));
    }

    /// Jittered wall: aggregated normal within a degree of ground truth.
    #[test]
    fn aggregate_jittered_wall_normal() {
        let scene = build_scene("box6", 3, 16).unwrap();
        let gt = voxelize_gt(&scene, 0.08);
        let mut provider = OracleEmbeddingProvider::new(scene, gt.clone(), 0.0, 5);
        provider.normal_jitter_deg = 5.0;
        let coords: Vec<[i32; 3]> = gt.voxels.iter().map(|v| v.coord).collect();
        let frag = provider.provide(0, &coords, gt.origin, gt.voxel_size).unwrap();
        // Members of instance 2 (an x-facing wall).
        let members: Vec<usize> = gt
            .voxels
            .iter()
            .enumerate()
            .filter_map(|(i, v)| (v.instance == 2).then_some(i))
            .collect();
        assert!(members.len() > 100);
        let params = aggregate_plane(&members, &frag.voxels).unwrap();
        let angle = params
            .normal
            .dot(Vec3::new(1.0, 0.0, 0.0))
            .clamp(-1.0, 1.0)
            .acos()
            .to_degrees();
        assert!(angle < 1.0, "aggregated normal off by {angle} degrees");
    }

    #[test]
    fn instance_dump_round_trips_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("instances.txt");
        let mask = vec![true, false, true];
        let mut pred = perfect_prediction(&mask);
        pred.params = Some(unit_plane());
        write_instance_dump(&path, &[pred]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let fields: Vec<&str> = text.split_whitespace().collect();
        assert_eq!(fields[0], "0");
        assert_eq!(fields[1], "plane");
        assert_eq!(fields[2], "2");
        assert_eq!(fields.len(), 3 + 10);
    }
}
