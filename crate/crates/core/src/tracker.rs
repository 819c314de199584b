//! Cross-fragment instance tracking.
//!
//! The query tracker carries each live instance's query embedding from
//! fragment i into fragment i+1 as an extra decoding query; a tracking
//! query that decodes a non-empty mask whose embedding still agrees with
//! the carried one merges into its global instance. The heuristic tracker
//! ignores embeddings and merges on plane geometry alone (normal angle,
//! offset gap, in-plane extent overlap) — the baseline whose failure mode
//! on nearby parallel planes the query tracker avoids.

use std::collections::HashMap;

use thiserror::Error;

use crate::geometry::{GeometryError, PlaneParams};
use crate::matcher::{
    aggregate_parts, FragmentEmbeddings, InstancePrediction, MatchError, QuerySet,
};
use crate::math::Vec3;

/// Instances unseen for this many consecutive fragments stop being carried
/// as tracking queries (their registry entries remain).
pub const RETIREMENT_FRAGMENTS: usize = 3;

/// Cosine-similarity floor for accepting a tracking-query match.
pub const TRACK_COSINE_MIN: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("fragment {got} does not advance past fragment {last}")]
    FragmentOrder { last: usize, got: usize },
    #[error("{got} tracking ids for {expected} tracking queries")]
    TrackingIds { expected: usize, got: usize },
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One global plane instance accumulated across fragments.
#[derive(Clone, Debug)]
pub struct GlobalInstance {
    pub id: u32,
    /// World voxel mask, sorted coordinates; only ever grows.
    pub mask: Vec<[i32; 3]>,
    /// Per-voxel predicted normals/centers, parallel to `mask`; kept so the
    /// plane can be re-aggregated over unions.
    pub voxel_normals: Vec<Vec3>,
    pub voxel_centers: Vec<Vec3>,
    pub params: PlaneParams,
    /// Unit-norm live embedding (match scoring).
    pub embedding: Vec<f64>,
    /// Raw carried query embedding (reused as the tracking query).
    pub query_embedding: Vec<f64>,
    pub last_seen: usize,
    pub retired: bool,
}

/// Registry of global instances plus bookkeeping.
#[derive(Clone, Debug, Default)]
pub struct TrackState {
    pub instances: Vec<GlobalInstance>,
    pub last_fragment: Option<usize>,
    /// World voxel ownership: first owner wins, masks stay disjoint.
    claimed: HashMap<[i32; 3], u32>,
}

/// One fragment's detection output handed to the tracker.
#[derive(Clone, Debug)]
pub struct FragmentResult {
    pub fragment_index: usize,
    /// Embeddings (and per-voxel plane predictions) of the fragment's
    /// occupied voxels; the instances' masks index into this domain.
    pub embeddings: FragmentEmbeddings,
    pub instances: Vec<InstancePrediction>,
    /// Query embedding behind each instance, parallel to `instances`.
    pub instance_embeddings: Vec<Vec<f64>>,
}

/// What a tracker step did, for logs and tests.
#[derive(Clone, Debug, Default)]
pub struct StepReport {
    /// (global id, instance index in the fragment) pairs merged.
    pub merged: Vec<(u32, usize)>,
    /// Global ids opened this step.
    pub created: Vec<u32>,
    /// Instances skipped for having fewer than 3 claimable voxels.
    pub dropped_small: usize,
}

/// Geometry gates of the heuristic tracker.
#[derive(Clone, Copy, Debug)]
pub struct HeuristicThresholds {
    /// Max normal angle, degrees.
    pub theta_merge_deg: f64,
    /// Max absolute offset gap, scene units.
    pub d_merge: f64,
    /// Min in-plane bounding-extent IoU.
    pub iou_merge: f64,
}

impl Default for HeuristicThresholds {
    fn default() -> Self {
        HeuristicThresholds { theta_merge_deg: 10.0, d_merge: 0.10, iou_merge: 0.3 }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

impl TrackState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Live (non-retired) instances in id order.
    pub fn live_instances(&self) -> impl Iterator<Item = &GlobalInstance> {
        self.instances.iter().filter(|i| !i.retired)
    }

    /// Tracking queries for the next fragment: the carried raw query
    /// embeddings of live instances, in id order, with real-class logits.
    /// Returns the query set and the global id behind each query.
    pub fn tracking_queries(&self) -> (QuerySet, Vec<u32>) {
        let mut embeddings = Vec::new();
        let mut ids = Vec::new();
        for inst in self.live_instances() {
            embeddings.push(inst.query_embedding.clone());
            ids.push(inst.id);
        }
        let class_logits = vec![[4.0, -4.0]; embeddings.len()];
        (QuerySet { embeddings, class_logits }, ids)
    }

    pub fn validate(&self) -> Result<(), TrackError> {
        let mut seen = std::collections::BTreeSet::new();
        for inst in &self.instances {
            assert!(seen.insert(inst.id), "duplicate instance id {}", inst.id);
            let norm: f64 = inst.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(
                (norm - 1.0).abs() < 1e-9 || inst.embedding.is_empty(),
                "live embedding not unit"
            );
        }
        Ok(())
    }

    fn check_order(&mut self, fragment_index: usize) -> Result<(), TrackError> {
        if let Some(last) = self.last_fragment {
            if fragment_index <= last {
                return Err(TrackError::FragmentOrder { last, got: fragment_index });
            }
        }
        self.last_fragment = Some(fragment_index);
        Ok(())
    }

    /// Claim the instance's voxels (first owner wins) and return the
    /// claimable subset with its per-voxel data.
    fn claim(
        &mut self,
        id: u32,
        fragment: &FragmentResult,
        inst: &InstancePrediction,
    ) -> (Vec<[i32; 3]>, Vec<Vec3>, Vec<Vec3>) {
        let vox = &fragment.embeddings.voxels;
        let mut coords = Vec::new();
        let mut normals = Vec::new();
        let mut centers = Vec::new();
        for &v in &inst.voxel_indices {
            let coord = vox.coords[v];
            if let std::collections::hash_map::Entry::Vacant(e) = self.claimed.entry(coord) {
                e.insert(id);
                coords.push(coord);
                normals.push(vox.normals[v]);
                centers.push(vox.centers[v]);
            }
        }
        (coords, normals, centers)
    }

    fn merge_into(
        &mut self,
        gid: u32,
        fragment: &FragmentResult,
        inst_idx: usize,
    ) -> Result<(), TrackError> {
        let inst = &fragment.instances[inst_idx];
        let (coords, normals, centers) = self.claim(gid, fragment, inst);
        let vox = &fragment.embeddings.voxels;
        let entry = self
            .instances
            .iter_mut()
            .find(|i| i.id == gid)
            .expect("merge target exists");
        for ((c, n), ctr) in coords.into_iter().zip(normals).zip(centers) {
            entry.mask.push(c);
            entry.voxel_normals.push(n);
            entry.voxel_centers.push(ctr);
        }
        // Keep the mask sorted with its parallel arrays.
        let mut order: Vec<usize> = (0..entry.mask.len()).collect();
        order.sort_by_key(|&i| entry.mask[i]);
        entry.mask = order.iter().map(|&i| entry.mask[i]).collect();
        entry.voxel_normals = order.iter().map(|&i| entry.voxel_normals[i]).collect();
        entry.voxel_centers = order.iter().map(|&i| entry.voxel_centers[i]).collect();

        let positions: Vec<Vec3> = entry
            .mask
            .iter()
            .map(|c| {
                vox.origin
                    + Vec3::new(
                        (c[0] as f64 + 0.5) * vox.voxel_size,
                        (c[1] as f64 + 0.5) * vox.voxel_size,
                        (c[2] as f64 + 0.5) * vox.voxel_size,
                    )
            })
            .collect();
        entry.params = aggregate_parts(&entry.voxel_normals, &entry.voxel_centers, &positions)?;
        entry.embedding = normalized(&fragment.instance_embeddings[inst_idx]);
        entry.query_embedding = fragment.instance_embeddings[inst_idx].clone();
        entry.last_seen = fragment.fragment_index;
        Ok(())
    }

    fn create_instance(
        &mut self,
        fragment: &FragmentResult,
        inst_idx: usize,
    ) -> Result<Option<u32>, TrackError> {
        let id = self.instances.iter().map(|i| i.id + 1).max().unwrap_or(0);
        let inst = &fragment.instances[inst_idx];
        let (coords, normals, centers) = self.claim(id, fragment, inst);
        if coords.len() < 3 {
            // Not enough voxels to define a plane; release the claims.
            for c in &coords {
                self.claimed.remove(c);
            }
            return Ok(None);
        }
        let vox = &fragment.embeddings.voxels;
        let positions: Vec<Vec3> = coords
            .iter()
            .map(|c| {
                vox.origin
                    + Vec3::new(
                        (c[0] as f64 + 0.5) * vox.voxel_size,
                        (c[1] as f64 + 0.5) * vox.voxel_size,
                        (c[2] as f64 + 0.5) * vox.voxel_size,
                    )
            })
            .collect();
        let params = aggregate_parts(&normals, &centers, &positions)?;
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_by_key(|&i| coords[i]);
        self.instances.push(GlobalInstance {
            id,
            mask: order.iter().map(|&i| coords[i]).collect(),
            voxel_normals: order.iter().map(|&i| normals[i]).collect(),
            voxel_centers: order.iter().map(|&i| centers[i]).collect(),
            params,
            embedding: normalized(&fragment.instance_embeddings[inst_idx]),
            query_embedding: fragment.instance_embeddings[inst_idx].clone(),
            last_seen: fragment.fragment_index,
            retired: false,
        });
        Ok(Some(id))
    }

    fn retire_stale(&mut self, fragment_index: usize) {
        for inst in &mut self.instances {
            if !inst.retired && fragment_index.saturating_sub(inst.last_seen) >= RETIREMENT_FRAGMENTS
            {
                inst.retired = true;
            }
        }
    }
}

/// Query-tracking step: instances decoded by a carried tracking query merge
/// into that query's global instance (mask union, parameters re-aggregated,
/// live embedding refreshed); instances from fresh detection queries open
/// new ids. `tracking_ids[k]` names the global instance behind tracking
/// query slot `k` (slots come first in the fragment's combined query set).
pub fn step(
    state: &mut TrackState,
    fragment: &FragmentResult,
    tracking_ids: &[u32],
) -> Result<StepReport, TrackError> {
    state.check_order(fragment.fragment_index)?;
    let mut report = StepReport::default();

    for (inst_idx, inst) in fragment.instances.iter().enumerate() {
        let slot = inst.query_index;
        if slot < tracking_ids.len() {
            // Tracking query: match only when non-empty and the embedding
            // still agrees with the carried one.
            if inst.voxel_indices.is_empty() {
                continue;
            }
            let gid = tracking_ids[slot];
            let carried = state
                .instances
                .iter()
                .find(|i| i.id == gid)
                .expect("tracking id refers to a registry instance")
                .embedding
                .clone();
            if cosine(&carried, &fragment.instance_embeddings[inst_idx]) >= TRACK_COSINE_MIN {
                state.merge_into(gid, fragment, inst_idx)?;
                report.merged.push((gid, inst_idx));
            }
        } else {
            if inst.voxel_indices.is_empty() {
                continue;
            }
            match state.create_instance(fragment, inst_idx)? {
                Some(id) => report.created.push(id),
                None => report.dropped_small += 1,
            }
        }
    }
    state.retire_stale(fragment.fragment_index);
    Ok(report)
}

fn bbox_on_frame(
    coords: &[[i32; 3]],
    origin: Vec3,
    voxel_size: f64,
    frame: &PlaneParams,
) -> Option<[f64; 4]> {
    if coords.is_empty() {
        return None;
    }
    let binormal = frame.binormal();
    let (mut u0, mut u1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in coords {
        let p = origin
            + Vec3::new(
                (c[0] as f64 + 0.5) * voxel_size,
                (c[1] as f64 + 0.5) * voxel_size,
                (c[2] as f64 + 0.5) * voxel_size,
            );
        let rel = p - frame.center;
        let u = rel.dot(frame.axis);
        let v = rel.dot(binormal);
        u0 = u0.min(u);
        u1 = u1.max(u);
        v0 = v0.min(v);
        v1 = v1.max(v);
    }
    Some([u0, u1, v0, v1])
}

fn rect_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[1].min(b[1]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[2].max(b[2])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[1] - a[0]).max(0.0) * (a[3] - a[2]).max(0.0);
    let area_b = (b[1] - b[0]).max(0.0) * (b[3] - b[2]).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Heuristic-tracking step: merging is decided by plane geometry alone —
/// normal angle below `theta_merge_deg`, offset gap below `d_merge`, and
/// the in-plane bounding-extent IoU (both masks projected onto the
/// candidate's plane frame) above `iou_merge`. This is the baseline that
/// wrongly fuses nearby parallel planes.
pub fn heuristic_step(
    state: &mut TrackState,
    fragment: &FragmentResult,
    thresholds: &HeuristicThresholds,
) -> Result<StepReport, TrackError> {
    state.check_order(fragment.fragment_index)?;
    let mut report = StepReport::default();
    let vox = &fragment.embeddings.voxels;

    for (inst_idx, inst) in fragment.instances.iter().enumerate() {
        if inst.voxel_indices.len() < 3 {
            if !inst.voxel_indices.is_empty() {
                report.dropped_small += 1;
            }
            continue;
        }
        let coords: Vec<[i32; 3]> = inst.voxel_indices.iter().map(|&v| vox.coords[v]).collect();
        let normals: Vec<Vec3> = inst.voxel_indices.iter().map(|&v| vox.normals[v]).collect();
        let centers: Vec<Vec3> = inst.voxel_indices.iter().map(|&v| vox.centers[v]).collect();
        let positions: Vec<Vec3> = inst.voxel_indices.iter().map(|&v| vox.position(v)).collect();
        let params = aggregate_parts(&normals, &centers, &positions)?;

        let mut best: Option<(u32, f64, f64)> = None; // (id, iou, |dd|)
        for cand in state.instances.iter() {
            let angle = params
                .normal
                .dot(cand.params.normal)
                .clamp(-1.0, 1.0)
                .acos()
                .to_degrees();
            let dd = (params.offset - cand.params.offset).abs();
            if angle >= thresholds.theta_merge_deg || dd >= thresholds.d_merge {
                continue;
            }
            let (Some(bb_new), Some(bb_cand)) = (
                bbox_on_frame(&coords, vox.origin, vox.voxel_size, &cand.params),
                bbox_on_frame(&cand.mask, vox.origin, vox.voxel_size, &cand.params),
            ) else {
                continue;
            };
            let iou = rect_iou(bb_new, bb_cand);
            if iou <= thresholds.iou_merge {
                continue;
            }
            let better = match best {
                None => true,
                Some((bid, biou, bdd)) => {
                    iou > biou || (iou == biou && (dd < bdd || (dd == bdd && cand.id < bid)))
                }
            };
            if better {
                best = Some((cand.id, iou, dd));
            }
        }
        match best {
            Some((gid, _, _)) => {
                state.merge_into(gid, fragment, inst_idx)?;
                report.merged.push((gid, inst_idx));
            }
            None => match state.create_instance(fragment, inst_idx)? {
                Some(id) => report.created.push(id),
                None => report.dropped_small += 1,
            },
        }
    }
    state.retire_stale(fragment.fragment_index);
    Ok(report)
}
