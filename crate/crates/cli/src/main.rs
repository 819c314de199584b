//! Command-line driver for the plane detection, tracking, and refinement
//! pipeline.
//!
//! Configuration precedence: built-in defaults < `--config` TOML file <
//! `PLANEDET_*` environment variables < command-line flags. Every effective
//! value is echoed to `run_manifest.txt` in the output directory.
//!
//! Exit codes: 0 success, 2 bad configuration, 3 missing input,
//! 4 numeric failure (refinement divergence).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use planedet_core::pipeline::{
    cmd_eval, cmd_generate, cmd_reconstruct, cmd_refine, cmd_render, PipelineConfig,
    PipelineError, TrackerMode,
};

#[derive(Parser)]
#[command(
    name = "planedet",
    about = "Plane detection, tracking, and differentiable-rendering refinement on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: frames, depth, id maps, GT voxels.
    Generate(StageArgs),
    /// Reconstruct plane instances from the generated frames.
    Reconstruct(StageArgs),
    /// Refine reconstructed planes with the differentiable renderer.
    Refine(StageArgs),
    /// Evaluate reconstructed (or refined) planes against ground truth.
    Eval(EvalArgs),
    /// Render reconstructed (or refined) planes to PPM images.
    Render(EvalArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Run directory holding all artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// TOML file with configuration overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Scene preset: box6, two-walls, adversarial-parallel.
    #[arg(long)]
    preset: Option<String>,
    /// Tracker: query or heuristic.
    #[arg(long)]
    tracker: Option<String>,
    /// Oracle embedding noise sigma.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    voxel_size: Option<f64>,
    #[arg(long)]
    tau_std: Option<f64>,
    #[arg(long)]
    min_views: Option<u32>,
    #[arg(long)]
    tau_mask: Option<f64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    fragment_len: Option<usize>,
    #[arg(long)]
    metric_tau: Option<f64>,
    #[arg(long)]
    theta_merge: Option<f64>,
    #[arg(long)]
    d_merge: Option<f64>,
    #[arg(long)]
    iou_merge: Option<f64>,
    #[arg(long)]
    lr_normal: Option<f64>,
    #[arg(long)]
    lr_offset: Option<f64>,
    #[arg(long)]
    lr_boundary: Option<f64>,
    #[arg(long)]
    lr_color: Option<f64>,
    #[arg(long)]
    refine_iterations: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    refine_views: Option<usize>,
    #[arg(long)]
    refine_resolution: Option<usize>,
    /// Bilinear feature sampling (true/false).
    #[arg(long)]
    bilinear: Option<bool>,
    #[arg(long)]
    normal_jitter: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Use the refined planes instead of the raw reconstruction.
    #[arg(long)]
    refined: bool,
}

fn env_var<T: std::str::FromStr>(name: &str) -> Result<Option<T>, String> {
    match std::env::var(name) {
        Ok(v) => v
            .parse::<T>()
            .map(Some)
            .map_err(|_| format!("cannot parse environment variable {name}={v}")),
        Err(_) => Ok(None),
    }
}

fn apply_env(cfg: &mut PipelineConfig) -> Result<(), String> {
    if let Some(v) = env_var::<String>("PLANEDET_PRESET")? {
        cfg.preset = v;
    }
    if let Some(v) = env_var("PLANEDET_SEED")? {
        cfg.seed = v;
    }
    if let Some(v) = env_var("PLANEDET_FRAGMENT_LEN")? {
        cfg.fragment_len = v;
    }
    if let Some(v) = env_var("PLANEDET_VOXEL_SIZE")? {
        cfg.voxel_size = v;
    }
    if let Some(v) = env_var("PLANEDET_TAU_STD")? {
        cfg.tau_std = v;
    }
    if let Some(v) = env_var("PLANEDET_MIN_VIEWS")? {
        cfg.min_views = v;
    }
    if let Some(v) = env_var("PLANEDET_SIGMA")? {
        cfg.sigma_embed = v;
    }
    if let Some(v) = env_var("PLANEDET_TAU_MASK")? {
        cfg.tau_mask = v;
    }
    if let Some(v) = env_var::<String>("PLANEDET_TRACKER")? {
        cfg.tracker = parse_tracker(&v)?;
    }
    if let Some(v) = env_var("PLANEDET_RESOLUTION")? {
        cfg.resolution = v;
    }
    if let Some(v) = env_var("PLANEDET_METRIC_TAU")? {
        cfg.metric_tau = v;
    }
    if let Some(v) = env_var("PLANEDET_BILINEAR")? {
        cfg.bilinear = v;
    }
    Ok(())
}

fn parse_tracker(v: &str) -> Result<TrackerMode, String> {
    match v {
        "query" => Ok(TrackerMode::Query),
        "heuristic" => Ok(TrackerMode::Heuristic),
        other => Err(format!("unknown tracker '{other}' (expected query or heuristic)")),
    }
}

fn build_config(args: &StageArgs) -> Result<PipelineConfig, String> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
            toml::from_str::<PipelineConfig>(&text)
                .map_err(|e| format!("cannot parse config {}: {e}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    apply_env(&mut cfg)?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = &args.preset {
        cfg.preset = v.clone();
    }
    if let Some(v) = &args.tracker {
        cfg.tracker = parse_tracker(v)?;
    }
    if let Some(v) = args.sigma {
        cfg.sigma_embed = v;
    }
    if let Some(v) = args.voxel_size {
        cfg.voxel_size = v;
    }
    if let Some(v) = args.tau_std {
        cfg.tau_std = v;
    }
    if let Some(v) = args.min_views {
        cfg.min_views = v;
    }
    if let Some(v) = args.tau_mask {
        cfg.tau_mask = v;
    }
    if let Some(v) = args.resolution {
        cfg.resolution = v;
    }
    if let Some(v) = args.fragment_len {
        cfg.fragment_len = v;
    }
    if let Some(v) = args.metric_tau {
        cfg.metric_tau = v;
    }
    if let Some(v) = args.theta_merge {
        cfg.theta_merge_deg = v;
    }
    if let Some(v) = args.d_merge {
        cfg.d_merge = v;
    }
    if let Some(v) = args.iou_merge {
        cfg.iou_merge = v;
    }
    if let Some(v) = args.lr_normal {
        cfg.lr_normal = v;
    }
    if let Some(v) = args.lr_offset {
        cfg.lr_offset = v;
    }
    if let Some(v) = args.lr_boundary {
        cfg.lr_boundary = v;
    }
    if let Some(v) = args.lr_color {
        cfg.lr_color = v;
    }
    if let Some(v) = args.refine_iterations {
        cfg.refine_iterations = v;
    }
    if let Some(v) = args.beta {
        cfg.beta = v;
    }
    if let Some(v) = args.refine_views {
        cfg.refine_views = v;
    }
    if let Some(v) = args.refine_resolution {
        cfg.refine_resolution = v;
    }
    if let Some(v) = args.bilinear {
        cfg.bilinear = v;
    }
    if let Some(v) = args.normal_jitter {
        cfg.normal_jitter_deg = v;
    }
    Ok(cfg)
}

fn exit_code_for(err: &PipelineError) -> u8 {
    match err {
        PipelineError::BadConfig(_) => 2,
        PipelineError::MissingInput(_) => 3,
        PipelineError::Diverged { .. } => 4,
        _ => 1,
    }
}

fn run() -> Result<(), (String, u8)> {
    let cli = Cli::parse();
    let bad_config = |m: String| (m, 2u8);

    match cli.command {
        Command::Generate(args) => {
            let cfg = build_config(&args).map_err(bad_config)?;
            let scene = cmd_generate(&cfg, &args.out)
                .map_err(|e| (e.to_string(), exit_code_for(&e)))?;
            println!(
                "generated '{}': {} planes, {} views ({} fragments) in {}",
                scene.name,
                scene.planes.len(),
                scene.trajectory.len(),
                scene.fragment_count(),
                args.out.display()
            );
        }
        Command::Reconstruct(args) => {
            let cfg = build_config(&args).map_err(bad_config)?;
            cfg.write_manifest(&args.out).map_err(|e| (e.to_string(), 1))?;
            let recon = cmd_reconstruct(&cfg, &args.out)
                .map_err(|e| (e.to_string(), exit_code_for(&e)))?;
            println!(
                "reconstructed {} instances ({} with fitted planes)",
                recon.state.instances.len(),
                recon.planes.len()
            );
            for inst in &recon.state.instances {
                let p = &inst.params;
                println!(
                    "  instance {}: {} voxels, normal ({:+.3}, {:+.3}, {:+.3}), offset {:+.4}",
                    inst.id,
                    inst.mask.len(),
                    p.normal.x,
                    p.normal.y,
                    p.normal.z,
                    p.offset
                );
            }
        }
        Command::Refine(args) => {
            let cfg = build_config(&args).map_err(bad_config)?;
            cfg.write_manifest(&args.out).map_err(|e| (e.to_string(), 1))?;
            let refined = cmd_refine(&cfg, &args.out)
                .map_err(|e| (e.to_string(), exit_code_for(&e)))?;
            let r = &refined.result;
            println!(
                "refined {} planes over {} iterations: loss {:.6} -> {:.6} (best {:.6} at {})",
                r.planes.len(),
                r.trace.len().saturating_sub(1),
                r.trace.first().copied().unwrap_or(f64::NAN),
                r.trace.last().copied().unwrap_or(f64::NAN),
                r.best_loss,
                r.best_iteration
            );
            if refined.diverged {
                return Err(("refinement diverged; last finite state saved".into(), 4));
            }
        }
        Command::Eval(args) => {
            let cfg = build_config(&args.stage).map_err(bad_config)?;
            let (geometry, segmentation) = cmd_eval(&cfg, &args.stage.out, args.refined)
                .map_err(|e| (e.to_string(), exit_code_for(&e)))?;
            println!("{geometry}");
            println!("{segmentation}");
        }
        Command::Render(args) => {
            let cfg = build_config(&args.stage).map_err(bad_config)?;
            let n = cmd_render(&cfg, &args.stage.out, args.refined)
                .map_err(|e| (e.to_string(), exit_code_for(&e)))?;
            println!("rendered {n} views into {}", args.stage.out.join("render").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err((msg, code)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
