//! End-to-end pipeline: scene generation, fragment-wise reconstruction,
//! differentiable refinement, and evaluation, with every stage reading and
//! writing its artifacts on disk.
//!
//! Output layout under the run directory:
//!
//! ```text
//! scene.toml                 scene description
//! frames/                    trajectory.txt, frame_###.ppm, depth_###.pfm, ids_###.pgm
//! gt_voxels.txt              geometric voxelization
//! recon/                     volume_f#.txt, instances_f#.txt, mask_cls_loss.txt,
//!                            planes.txt, planes.bin, mesh.obj
//! refine/                    trace.csv, planes.bin, before_###.ppm, after_###.ppm
//! eval/                      geometry.csv, segmentation.csv
//! render/                    render_###.ppm
//! run_manifest.txt           effective configuration echo
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraView, GeometryError, PolarPoint};
use crate::img::ImgError;
use crate::matcher::{
    decode_masks, mask_cls_loss, write_instance_dump, EmbeddingProvider, GtSegment, GtSegmentSet,
    MatchError, OracleEmbeddingProvider, QuerySet,
};
use crate::math::Vec3;
use crate::metrics::{
    geometry_metrics, sample_plane_surface, sample_scene_surface, segmentation_metrics,
    transfer_labels, write_geometry_csv, write_segmentation_csv, GeometryReport, MetricsError,
    SampledSurface, SegmentationReport, SAMPLE_SPACING,
};
use crate::mlp::{fit_mlp, init_boundary_from_voxels, FitConfig, MlpError, MlpFunction};
use crate::render::{
    export_obj, read_planes_bin, render, write_loss_trace, write_plane_sidecar, write_planes_bin,
    BoundedPlane, RefineConfig, RefineResult, RenderError,
};
use crate::synth::{
    build_scene, rasterize, read_frames, read_gt_voxels, voxelize_gt, write_frames,
    write_gt_voxels, SceneSpec, SynthError,
};
use crate::tracker::{
    heuristic_step, step, FragmentResult, HeuristicThresholds, TrackError, TrackState,
};
use crate::volume::{
    classify_occupancy, occlusion_mask, occupancy, unproject, unproject_with_visibility,
    FeatureMap, OccupancyStatus, Sampling, VolumeError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("missing input: {0}")]
    MissingInput(PathBuf),
    #[error("refinement diverged at iteration {iteration}; last finite state saved")]
    Diverged { iteration: usize },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Img(#[from] ImgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which tracker merges instances across fragments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackerMode {
    Query,
    Heuristic,
}

fn default_preset() -> String {
    "box6".into()
}
fn default_fragment_len() -> usize {
    9
}
fn default_voxel_size() -> f64 {
    0.04
}
fn default_tau_std() -> f64 {
    0.12
}
fn default_min_views() -> u32 {
    2
}
fn default_sigma_embed() -> f64 {
    0.1
}
fn default_tau_mask() -> f64 {
    0.5
}
fn default_tracker() -> TrackerMode {
    TrackerMode::Query
}
fn default_metric_tau() -> f64 {
    0.05
}
fn default_resolution() -> usize {
    256
}
fn default_bilinear() -> bool {
    true
}
fn default_refine_resolution() -> usize {
    64
}
fn default_refine_views() -> usize {
    8
}
fn default_d_merge() -> f64 {
    0.10
}
fn default_theta_merge() -> f64 {
    10.0
}
fn default_iou_merge() -> f64 {
    0.3
}
fn default_lr_normal() -> f64 {
    0.02
}
fn default_lr_offset() -> f64 {
    0.1
}
fn default_lr_mlp() -> f64 {
    1e-3
}
fn default_iterations() -> usize {
    200
}
fn default_beta() -> f64 {
    20.0
}
fn default_background() -> [f64; 3] {
    [0.5, 0.5, 0.5]
}

/// Every knob of the pipeline; file, environment, and flag overridable
/// through the CLI.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Scene preset driving generation (box6, two-walls,
    /// adversarial-parallel).
    pub preset: String,
    /// Views per fragment.
    pub fragment_len: usize,
    /// Voxel edge, scene units.
    pub voxel_size: f64,
    /// Occupancy view-consistency scale.
    pub tau_std: f64,
    /// Minimum observing views for occupancy.
    pub min_views: u32,
    /// Gaussian noise of the oracle embeddings.
    pub sigma_embed: f64,
    /// Angular jitter of per-voxel oracle normals, degrees.
    pub normal_jitter_deg: f64,
    /// Soft-mask binarization threshold.
    pub tau_mask: f64,
    /// Cross-fragment tracker choice.
    pub tracker: TrackerMode,
    /// Heuristic-tracker gates.
    pub theta_merge_deg: f64,
    pub d_merge: f64,
    pub iou_merge: f64,
    /// Refinement settings.
    pub lr_normal: f64,
    pub lr_offset: f64,
    pub lr_boundary: f64,
    pub lr_color: f64,
    pub refine_iterations: usize,
    pub beta: f64,
    pub background: [f64; 3],
    /// Views and raster size of the refinement stage.
    pub refine_views: usize,
    pub refine_resolution: usize,
    /// Evaluation distance threshold.
    pub metric_tau: f64,
    /// Raster size of the generated frames.
    pub resolution: usize,
    /// Bilinear (rather than nearest-pixel) feature sampling.
    pub bilinear: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            preset: default_preset(),
            fragment_len: default_fragment_len(),
            voxel_size: default_voxel_size(),
            tau_std: default_tau_std(),
            min_views: default_min_views(),
            sigma_embed: default_sigma_embed(),
            normal_jitter_deg: 0.0,
            tau_mask: default_tau_mask(),
            tracker: default_tracker(),
            theta_merge_deg: default_theta_merge(),
            d_merge: default_d_merge(),
            iou_merge: default_iou_merge(),
            lr_normal: default_lr_normal(),
            lr_offset: default_lr_offset(),
            lr_boundary: default_lr_mlp(),
            lr_color: default_lr_mlp(),
            refine_iterations: default_iterations(),
            beta: default_beta(),
            background: default_background(),
            refine_views: default_refine_views(),
            refine_resolution: default_refine_resolution(),
            metric_tau: default_metric_tau(),
            resolution: default_resolution(),
            bilinear: default_bilinear(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.fragment_len == 0 {
            return Err(PipelineError::BadConfig("fragment_len must be positive".into()));
        }
        if self.voxel_size <= 0.0 || self.tau_std <= 0.0 || self.beta <= 0.0 {
            return Err(PipelineError::BadConfig(
                "voxel_size, tau_std, and beta must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.tau_mask) {
            return Err(PipelineError::BadConfig("tau_mask must be in [0, 1]".into()));
        }
        if self.refine_iterations == 0 {
            return Err(PipelineError::BadConfig("refine_iterations must be >= 1".into()));
        }
        if self.resolution < 8 || self.refine_resolution < 8 {
            return Err(PipelineError::BadConfig("resolutions must be at least 8".into()));
        }
        Ok(())
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            lr_normal: self.lr_normal,
            lr_offset: self.lr_offset,
            lr_boundary: self.lr_boundary,
            lr_color: self.lr_color,
            iterations: self.refine_iterations,
            beta: self.beta,
            background: self.background,
        }
    }

    pub fn heuristic_thresholds(&self) -> HeuristicThresholds {
        HeuristicThresholds {
            theta_merge_deg: self.theta_merge_deg,
            d_merge: self.d_merge,
            iou_merge: self.iou_merge,
        }
    }

    pub fn sampling(&self) -> Sampling {
        if self.bilinear {
            Sampling::Bilinear
        } else {
            Sampling::Nearest
        }
    }

    /// Human-readable manifest of every effective value.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("write");
        kv("preset", self.preset.clone());
        kv("fragment_len", self.fragment_len.to_string());
        kv("voxel_size", self.voxel_size.to_string());
        kv("tau_std", self.tau_std.to_string());
        kv("min_views", self.min_views.to_string());
        kv("sigma_embed", self.sigma_embed.to_string());
        kv("normal_jitter_deg", self.normal_jitter_deg.to_string());
        kv("tau_mask", self.tau_mask.to_string());
        kv("tracker", format!("{:?}", self.tracker).to_lowercase());
        kv("theta_merge_deg", self.theta_merge_deg.to_string());
        kv("d_merge", self.d_merge.to_string());
        kv("iou_merge", self.iou_merge.to_string());
        kv("lr_normal", self.lr_normal.to_string());
        kv("lr_offset", self.lr_offset.to_string());
        kv("lr_boundary", self.lr_boundary.to_string());
        kv("lr_color", self.lr_color.to_string());
        kv("refine_iterations", self.refine_iterations.to_string());
        kv("beta", self.beta.to_string());
        kv(
            "background",
            format!("{} {} {}", self.background[0], self.background[1], self.background[2]),
        );
        kv("refine_views", self.refine_views.to_string());
        kv("refine_resolution", self.refine_resolution.to_string());
        kv("metric_tau", self.metric_tau.to_string());
        kv("resolution", self.resolution.to_string());
        kv("bilinear", self.bilinear.to_string());
        kv("seed", self.seed.to_string());
        out
    }

    pub fn write_manifest(&self, out_dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("run_manifest.txt"), self.manifest())?;
        Ok(())
    }
}

fn require(path: PathBuf) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingInput(path))
    }
}

/// Generate the scene, frames, and ground-truth voxelization on disk.
pub fn cmd_generate(config: &PipelineConfig, out_dir: &Path) -> Result<SceneSpec, PipelineError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let scene = build_scene(&config.preset, config.seed, config.resolution)?;
    scene.save(&out_dir.join("scene.toml"))?;
    let frames = rasterize(&scene)?;
    write_frames(&out_dir.join("frames"), &frames)?;
    let gt = voxelize_gt(&scene, config.voxel_size);
    write_gt_voxels(&out_dir.join("gt_voxels.txt"), &gt)?;
    config.write_manifest(out_dir)?;
    Ok(scene)
}

/// Everything the reconstruction stage produced, in memory.
pub struct Reconstruction {
    pub state: TrackState,
    pub planes: Vec<BoundedPlane>,
    /// Mean observed color per world voxel (over all fragments).
    pub voxel_colors: HashMap<[i32; 3], [f64; 3]>,
    /// Per-fragment mask-classification loss against the ground-truth
    /// segments (diagnostic).
    pub fragment_losses: Vec<f64>,
    /// Voxels that were classifiable (enough unoccluded views) in at least
    /// one fragment; evaluation restricted to ground truth intersected
    /// with this set is fair to the trajectory.
    pub classifiable: std::collections::BTreeSet<[i32; 3]>,
}

/// Fragment-wise reconstruction: volume, occupancy, occlusion, embedding
/// decode, tracking, then bounded planes fitted from the accumulated
/// instances. Reads the artifacts of [`cmd_generate`] from `out_dir`.
pub fn cmd_reconstruct(
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<Reconstruction, PipelineError> {
    config.validate()?;
    let scene = SceneSpec::load(&require(out_dir.join("scene.toml"))?)?;
    require(out_dir.join("frames").join("trajectory.txt"))?;
    let frames = read_frames(&out_dir.join("frames"))?;
    let gt = read_gt_voxels(&require(out_dir.join("gt_voxels.txt"))?)?;
    let recon_dir = out_dir.join("recon");
    std::fs::create_dir_all(&recon_dir)?;

    let provider = OracleEmbeddingProvider {
        scene: scene.clone(),
        gt: gt.clone(),
        sigma: config.sigma_embed,
        normal_jitter_deg: config.normal_jitter_deg,
        query_scale: 10.0,
        null_queries: 2,
        seed: config.seed,
    };

    let n_fragments = frames.views.len() / config.fragment_len;
    let mut state = TrackState::new();
    let mut voxel_colors: HashMap<[i32; 3], ([f64; 3], u32)> = HashMap::new();
    let mut fragment_losses = Vec::new();
    let mut loss_log = String::new();
    let mut classifiable: std::collections::BTreeSet<[i32; 3]> = Default::default();

    for f in 0..n_fragments {
        let views: Vec<CameraView> =
            frames.views[f * config.fragment_len..(f + 1) * config.fragment_len].to_vec();
        let features: Vec<FeatureMap> = views.iter().map(FeatureMap::from_rgb).collect();

        let mut volume =
            unproject(&views, &features, scene.bounds, config.voxel_size, config.sampling())?;
        occupancy(&mut volume, config.tau_std, config.min_views);
        let mask = occlusion_mask(&volume, &views);
        let status = classify_occupancy(&volume, &views, &mask);
        crate::volume::write_volume_dump(&recon_dir.join(format!("volume_f{f}.txt")), &volume)?;

        let occupied: Vec<[i32; 3]> = volume
            .entries()
            .iter()
            .zip(&status)
            .filter_map(|((c, _), &s)| (s == OccupancyStatus::Occupied).then_some(*c))
            .collect();
        for ((c, agg), &s) in volume.entries().iter().zip(&status) {
            if s != OccupancyStatus::Occluded && agg.count >= config.min_views {
                classifiable.insert(*c);
            }
        }
        if occupied.is_empty() {
            continue;
        }

        // Occlusion-filtered second pass for clean per-voxel colors.
        let clean = unproject_with_visibility(&volume, &views, &features, &mask, config.sampling())?;
        for coord in &occupied {
            let agg = clean.get(*coord).or_else(|| volume.get(*coord));
            if let Some(agg) = agg {
                let entry = voxel_colors.entry(*coord).or_insert(([0.0; 3], 0));
                for c in 0..3 {
                    entry.0[c] += agg.mean[c];
                }
                entry.1 += 1;
            }
        }

        let frag_embed = provider.provide(f, &occupied, scene.bounds.min, config.voxel_size)?;

        // Tracking queries first so near-ties resolve toward them.
        let (queries, tracking_ids) = match config.tracker {
            TrackerMode::Query => state.tracking_queries(),
            TrackerMode::Heuristic => (QuerySet { embeddings: vec![], class_logits: vec![] }, vec![]),
        };
        let combined = queries.concat(&frag_embed.detection_queries);
        let mut instances = decode_masks(&frag_embed.voxels, &combined, config.tau_mask)?;
        filter_instance_members(&mut instances, &frag_embed.voxels, config.voxel_size);
        write_instance_dump(&recon_dir.join(format!("instances_f{f}.txt")), &instances)?;

        // Mask-classification diagnostic against the GT segments present.
        let mut gt_ids: Vec<u32> = occupied
            .iter()
            .filter_map(|c| gt.voxels.binary_search_by_key(c, |v| v.coord).ok())
            .map(|i| gt.voxels[i].instance)
            .collect();
        gt_ids.sort_unstable();
        gt_ids.dedup();
        let segments: Vec<GtSegment> = gt_ids
            .iter()
            .map(|&id| {
                let mask: Vec<bool> = occupied
                    .iter()
                    .map(|c| {
                        gt.voxels
                            .binary_search_by_key(c, |v| v.coord)
                            .map(|i| gt.voxels[i].instance == id)
                            .unwrap_or(false)
                    })
                    .collect();
                let plane = scene.planes.iter().find(|p| p.id == id).expect("gt plane");
                GtSegment { class_id: 0, mask, params: plane.params }
            })
            .collect();
        let gt_set = GtSegmentSet { segments };
        // Diagnostic on the detection queries only; carried tracking
        // queries duplicate them and would each pay the no-object term.
        let detection_only: Vec<crate::matcher::InstancePrediction> = instances
            .iter()
            .filter(|i| i.query_index >= tracking_ids.len())
            .cloned()
            .collect();
        if detection_only.len() >= gt_set.len() && !gt_set.segments.is_empty() {
            let (loss, _) = mask_cls_loss(&detection_only, &gt_set)?;
            writeln!(loss_log, "fragment {f}: mask_cls_loss = {loss}").expect("write");
            fragment_losses.push(loss);
        }

        let instance_embeddings: Vec<Vec<f64>> =
            instances.iter().map(|i| combined.embeddings[i.query_index].clone()).collect();
        let fragment = FragmentResult {
            fragment_index: f,
            embeddings: frag_embed,
            instances,
            instance_embeddings,
        };
        match config.tracker {
            TrackerMode::Query => {
                step(&mut state, &fragment, &tracking_ids)?;
            }
            TrackerMode::Heuristic => {
                heuristic_step(&mut state, &fragment, &config.heuristic_thresholds())?;
            }
        }
    }
    std::fs::write(recon_dir.join("mask_cls_loss.txt"), loss_log)?;

    let voxel_colors: HashMap<[i32; 3], [f64; 3]> = voxel_colors
        .into_iter()
        .map(|(c, (sum, n))| (c, [sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64]))
        .collect();

    let planes = fit_bounded_planes(config, &state, &voxel_colors, scene.bounds.min)?;
    write_planes_bin(&recon_dir.join("planes.bin"), &planes)?;
    write_plane_sidecar(&recon_dir.join("planes.txt"), &planes)?;
    export_obj(&recon_dir.join("mesh.obj"), &planes)?;

    Ok(Reconstruction { state, planes, voxel_colors, fragment_losses, classifiable })
}

/// Fit each tracked instance's boundary and color networks from its voxel
/// mask and observed voxel colors. `origin` is the voxel grid origin (the
/// scene bounds minimum) the mask coordinates refer to.
fn fit_bounded_planes(
    config: &PipelineConfig,
    state: &TrackState,
    voxel_colors: &HashMap<[i32; 3], [f64; 3]>,
    origin: Vec3,
) -> Result<Vec<BoundedPlane>, PipelineError> {
    let mut planes = Vec::new();
    for inst in &state.instances {
        if inst.mask.len() < 3 {
            continue;
        }
        let binormal = inst.params.binormal();
        let polar: Vec<PolarPoint> = inst
            .mask
            .iter()
            .map(|c| {
                let p = origin
                    + Vec3::new(
                        (c[0] as f64 + 0.5) * config.voxel_size,
                        (c[1] as f64 + 0.5) * config.voxel_size,
                        (c[2] as f64 + 0.5) * config.voxel_size,
                    );
                // Project onto the plane before taking polar coordinates.
                let rel = p - inst.params.center;
                let in_plane = rel - inst.params.normal * rel.dot(inst.params.normal);
                let r = in_plane.norm();
                let theta = wrap(in_plane.dot(binormal).atan2(in_plane.dot(inst.params.axis)));
                PolarPoint { r, theta }
            })
            .collect();
        let (boundary, _fit_err) = init_boundary_from_voxels(&polar, config.seed ^ inst.id as u64)?;

        let mut color = MlpFunction::color(config.seed ^ ((inst.id as u64) << 8));
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for (c, pp) in inst.mask.iter().zip(&polar) {
            if let Some(rgb) = voxel_colors.get(c) {
                inputs.push(vec![pp.theta, pp.r]);
                targets.push(rgb.to_vec());
            }
        }
        // Full-batch fitting over every voxel would dominate the runtime;
        // a strided subsample carries the same color signal.
        const MAX_COLOR_SAMPLES: usize = 384;
        if inputs.len() > MAX_COLOR_SAMPLES {
            let stride = inputs.len().div_ceil(MAX_COLOR_SAMPLES);
            inputs = inputs.into_iter().step_by(stride).collect();
            targets = targets.into_iter().step_by(stride).collect();
        }
        if inputs.len() >= 8 {
            fit_mlp(
                &mut color,
                &inputs,
                &targets,
                &FitConfig { iterations: 800, learning_rate: 2e-2 },
            )?;
        }
        planes.push(BoundedPlane::new(inst.id, inst.params, boundary, color)?);
    }
    Ok(planes)
}

/// The subset of trajectory views the refinement stage uses, rasterized at
/// the refinement resolution.
pub fn refine_views(config: &PipelineConfig, scene: &SceneSpec) -> Result<Vec<CameraView>, PipelineError> {
    let mut small = scene.clone();
    for cam in &mut small.trajectory {
        let scale = config.refine_resolution as f64 / cam.width as f64;
        cam.fx *= scale;
        cam.fy *= scale;
        cam.cx *= scale;
        cam.cy *= scale;
        cam.width = config.refine_resolution;
        cam.height = config.refine_resolution;
    }
    let count = small.trajectory.len();
    let take = config.refine_views.min(count).max(1);
    let stride = (count / take).max(1);
    small.trajectory = small
        .trajectory
        .into_iter()
        .step_by(stride)
        .take(take)
        .collect();
    let frames = rasterize(&small)?;
    Ok(frames.views)
}

/// Refinement artifacts.
pub struct Refinement {
    pub result: RefineResult,
    pub diverged: bool,
}

/// Gradient-descent refinement of the reconstructed planes against
/// re-rasterized frames; writes before/after renders, the loss trace, and
/// the refined plane file.
pub fn cmd_refine(config: &PipelineConfig, out_dir: &Path) -> Result<Refinement, PipelineError> {
    config.validate()?;
    let scene = SceneSpec::load(&require(out_dir.join("scene.toml"))?)?;
    let planes = read_planes_bin(&require(out_dir.join("recon").join("planes.bin"))?)?;
    let refine_dir = out_dir.join("refine");
    std::fs::create_dir_all(&refine_dir)?;

    let views = refine_views(config, &scene)?;
    for (i, view) in views.iter().enumerate() {
        let img = render(&planes, view, config.beta, config.background);
        crate::img::write_ppm(
            &refine_dir.join(format!("before_{i:03}.ppm")),
            img.width,
            img.height,
            &img.rgb,
        )?;
    }

    let (result, diverged) = match crate::render::refine(&planes, &views, &config.refine_config())
    {
        Ok(result) => (result, false),
        Err(RenderError::Diverged { last, .. }) => (*last, true),
        Err(e) => return Err(e.into()),
    };

    write_loss_trace(&refine_dir.join("trace.csv"), &result.trace)?;
    write_planes_bin(&refine_dir.join("planes.bin"), &result.planes)?;
    write_plane_sidecar(&refine_dir.join("planes.txt"), &result.planes)?;
    for (i, view) in views.iter().enumerate() {
        let img = render(&result.planes, view, config.beta, config.background);
        crate::img::write_ppm(
            &refine_dir.join(format!("after_{i:03}.ppm")),
            img.width,
            img.height,
            &img.rgb,
        )?;
    }
    Ok(Refinement { result, diverged })
}

/// Sample the predicted surface of a plane set: each plane's star-convex
/// region under its boundary network.
pub fn sample_predicted_surface(planes: &[BoundedPlane], spacing: f64) -> SampledSurface {
    let mut out = SampledSurface::default();
    for plane in planes {
        let boundary = &plane.boundary;
        sample_plane_surface(
            &plane.params,
            &|theta| boundary.forward(&[theta]).expect("boundary eval")[0],
            spacing,
            plane.id,
            &mut out,
        );
    }
    out
}

/// Evaluate reconstructed (or refined, when `refined` is set) planes
/// against the scene's ground truth: geometry metrics plus label-transfer
/// segmentation metrics. Writes CSV reports.
pub fn cmd_eval(
    config: &PipelineConfig,
    out_dir: &Path,
    refined: bool,
) -> Result<(GeometryReport, SegmentationReport), PipelineError> {
    config.validate()?;
    let scene = SceneSpec::load(&require(out_dir.join("scene.toml"))?)?;
    let planes_path = if refined {
        out_dir.join("refine").join("planes.bin")
    } else {
        out_dir.join("recon").join("planes.bin")
    };
    let planes = read_planes_bin(&require(planes_path)?)?;
    if planes.is_empty() {
        return Err(PipelineError::BadConfig("no planes to evaluate".into()));
    }

    let pred = sample_predicted_surface(&planes, SAMPLE_SPACING);
    let gt = sample_scene_surface(&scene, SAMPLE_SPACING);
    let geometry = geometry_metrics(&pred, &gt, config.metric_tau)?;
    let transferred = transfer_labels(&pred, &gt)?;
    let segmentation = segmentation_metrics(&gt.labels, &transferred.labels)?;

    let eval_dir = out_dir.join("eval");
    std::fs::create_dir_all(&eval_dir)?;
    write_geometry_csv(&eval_dir.join("geometry.csv"), &geometry)?;
    write_segmentation_csv(&eval_dir.join("segmentation.csv"), &segmentation)?;
    Ok((geometry, segmentation))
}

/// Render the reconstructed (or refined) planes for the refinement views.
pub fn cmd_render(
    config: &PipelineConfig,
    out_dir: &Path,
    refined: bool,
) -> Result<usize, PipelineError> {
    config.validate()?;
    let scene = SceneSpec::load(&require(out_dir.join("scene.toml"))?)?;
    let planes_path = if refined {
        out_dir.join("refine").join("planes.bin")
    } else {
        out_dir.join("recon").join("planes.bin")
    };
    let planes = read_planes_bin(&require(planes_path)?)?;
    let render_dir = out_dir.join("render");
    std::fs::create_dir_all(&render_dir)?;
    let views = refine_views(config, &scene)?;
    for (i, view) in views.iter().enumerate() {
        let img = render(&planes, view, config.beta, config.background);
        crate::img::write_ppm(
            &render_dir.join(format!("render_{i:03}.ppm")),
            img.width,
            img.height,
            &img.rgb,
        )?;
    }
    Ok(views.len())
}

fn wrap(mut theta: f64) -> f64 {
    if theta < 0.0 {
        theta += std::f64::consts::TAU;
    }
    if theta >= std::f64::consts::TAU {
        theta = 0.0;
    }
    theta
}

/// Normal-agreement gate of the member filter, degrees.
const MEMBER_FILTER_ANGLE_DEG: f64 = 15.0;

/// Drop mask members whose per-voxel plane prediction disagrees with the
/// instance's robust consensus (median offset, mean normal). Occupancy
/// false positives otherwise join instances through the soft-mask argmax
/// and drag the aggregated plane center off the surface.
fn filter_instance_members(
    instances: &mut [crate::matcher::InstancePrediction],
    voxels: &crate::matcher::VoxelEmbeddings,
    voxel_size: f64,
) {
    let cos_min = MEMBER_FILTER_ANGLE_DEG.to_radians().cos();
    let offset_gate = 1.25 * voxel_size;
    for inst in instances.iter_mut() {
        if inst.voxel_indices.len() < 3 {
            continue;
        }
        let mut n_ref = Vec3::ZERO;
        for &v in &inst.voxel_indices {
            n_ref += voxels.normals[v];
        }
        let Some(n_ref) = n_ref.normalized() else { continue };
        let mut offsets: Vec<f64> = inst.voxel_indices.iter().map(|&v| voxels.offsets[v]).collect();
        offsets.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let d_ref = offsets[offsets.len() / 2];

        let keep: Vec<usize> = inst
            .voxel_indices
            .iter()
            .copied()
            .filter(|&v| {
                voxels.normals[v].dot(n_ref) >= cos_min
                    && (voxels.offsets[v] - d_ref).abs() <= offset_gate
            })
            .collect();
        inst.binary_mask = vec![false; voxels.len()];
        for &v in &keep {
            inst.binary_mask[v] = true;
        }
        inst.voxel_indices = keep;
    }
}
