//! Command-line driver: synthetic scene generation, the full
//! reconstruction pipeline, novel-view rendering, and evaluation.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use recon_core::camera::Camera;
use recon_core::eval::{chamfer, psnr, ssim};
use recon_core::ibr::{synthesize_novel, IbrSources};
use recon_core::img::ImageBuffer;
use recon_core::io;
use recon_core::mvs::DepthMap;
use recon_core::pipeline::{run_full, PipelineConfig};
use recon_core::scene::{arc_cameras, render_ground_truth, sample_surface, SceneFile};
use recon_core::sdf::{render_depth_map, render_image, VoxelSdfGrid};
use recon_core::Error;

#[derive(Parser)]
#[command(name = "recon", about = "Sparse-view stereo + voxel-SDF reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene to images, depths, cameras, and a
    /// ground-truth point cloud.
    GenScene(GenSceneArgs),
    /// Run the full reconstruction pipeline from a JSON config.
    Run(RunArgs),
    /// Render a novel view from a grid checkpoint.
    Render(RenderArgs),
    /// Compare a reconstruction against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenSceneArgs {
    /// Scene description JSON.
    scene: PathBuf,
    /// Output directory (created if missing).
    out_dir: PathBuf,
    /// Number of views (default: the scene file's camera count).
    #[arg(long)]
    views: Option<usize>,
    /// Image resolution as WxH.
    #[arg(long, default_value = "128x96")]
    res: String,
    /// Seed for the ground-truth surface sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ground-truth cloud size.
    #[arg(long, default_value_t = 20000)]
    gt_points: usize,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration JSON.
    config: PathBuf,
    /// Output directory (created if missing).
    out_dir: PathBuf,
    /// Disable one ingredient; repeatable. One of: no-gce,
    /// no-soft-consistency, no-prob-volume, no-weight-loss, mvs-only.
    #[arg(long = "ablate")]
    ablate: Vec<String>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RenderArgs {
    /// Grid checkpoint (.sdfg).
    grid: PathBuf,
    /// Target camera JSON.
    camera: PathBuf,
    /// Output PNG.
    #[arg(short, long)]
    out: PathBuf,
    /// Also write the rendered depth as PFM.
    #[arg(long)]
    depth: Option<PathBuf>,
    /// Blend warped source pixels over the grid render.
    #[arg(long)]
    ibr: bool,
    /// Source images for --ibr; paired with --src-cam in order.
    #[arg(long = "src-image")]
    src_images: Vec<PathBuf>,
    /// Source cameras for --ibr.
    #[arg(long = "src-cam")]
    src_cams: Vec<PathBuf>,
    /// Samples per ray.
    #[arg(long, default_value_t = 64)]
    samples: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Reconstructed point cloud (.ply).
    recon: PathBuf,
    /// Reference point cloud (.ply).
    gt: PathBuf,
    /// Image pairs to score (rendered then reference); repeatable.
    #[arg(long = "image-pair", num_args = 2, value_names = ["RENDERED", "REFERENCE"])]
    image_pairs: Vec<PathBuf>,
    /// Where to write metrics JSON (stdout if omitted).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

/// Run configuration: where the scene artifacts live plus the pipeline
/// parameters.
#[derive(Debug, Serialize, Deserialize)]
struct RunConfig {
    scene_dir: PathBuf,
    /// Number of views to use (default: all found).
    #[serde(default)]
    views: Option<usize>,
    pipeline: PipelineConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    config: PathBuf,
    out_dir: PathBuf,
    seed: u64,
    /// Unix seconds; honors SOURCE_DATE_EPOCH for reproducible output.
    started_at: u64,
    finished_at: u64,
    artifacts: Vec<PathBuf>,
}

fn now_unix() -> u64 {
    if let Ok(v) = std::env::var("SOURCE_DATE_EPOCH") {
        if let Ok(t) = v.parse() {
            return t;
        }
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("RECON_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Treat bad invocations as configuration errors, but let
            // --help/--version exit cleanly.
            let _ = e.print();
            return if e.exit_code() == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    let result = match cli.command {
        Command::GenScene(a) => cmd_gen_scene(a),
        Command::Run(a) => cmd_run(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e))
        }
    }
}

/// 1 for configuration problems, 2 for runtime failures.
fn classify(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::InvalidConfig { .. } | Error::InvalidQ(_) | Error::Json(_) => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 1;
        }
    }
    2
}

fn parse_res(s: &str) -> anyhow::Result<(usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 2 {
        bail!(Error::InvalidConfig {
            field: "--res".into(),
            reason: format!("expected WxH, got '{s}'"),
        });
    }
    let w = parts[0].parse().map_err(|_| Error::InvalidConfig {
        field: "--res".into(),
        reason: format!("bad width '{}'", parts[0]),
    })?;
    let h = parts[1].parse().map_err(|_| Error::InvalidConfig {
        field: "--res".into(),
        reason: format!("bad height '{}'", parts[1]),
    })?;
    Ok((w, h))
}

/// Scene-level facts the run step needs but cannot derive from the
/// rendered artifacts alone.
#[derive(Debug, Serialize, Deserialize)]
struct SceneMeta {
    bounds: recon_core::bounds::Aabb,
    depth_range: [f64; 2],
    views: usize,
}

fn cmd_gen_scene(a: GenSceneArgs) -> anyhow::Result<()> {
    let file: SceneFile = io::read_json(&a.scene)
        .with_context(|| format!("reading scene file {}", a.scene.display()))?;
    let (width, height) = parse_res(&a.res)?;
    let n = a.views.unwrap_or(file.cameras.n);
    if n < 2 {
        bail!(Error::InvalidConfig {
            field: "cameras.n".into(),
            reason: "need at least 2 views".into(),
        });
    }
    std::fs::create_dir_all(&a.out_dir)?;
    let scene = file.scene();
    let cams = arc_cameras(
        n,
        file.cameras.radius,
        Vector3::from(file.cameras.center),
        file.cameras.fov_deg,
        width,
        height,
        file.cameras.arc_deg,
    );
    let light = Vector3::from(file.light_dir);
    for (i, cam) in cams.iter().enumerate() {
        let (color, depth) = render_ground_truth(&scene, cam, &light);
        io::write_png(&a.out_dir.join(format!("view_{i:03}.png")), &color)?;
        io::write_pfm(&a.out_dir.join(format!("depth_{i:03}.pfm")), &depth)?;
        io::write_json(&a.out_dir.join(format!("cam_{i:03}.json")), &cam.to_json())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let gt = sample_surface(&scene, a.gt_points, &mut rng);
    io::write_ply(&a.out_dir.join("gt.ply"), &gt)?;
    io::write_json(
        &a.out_dir.join("scene_meta.json"),
        &SceneMeta {
            bounds: file.bounds,
            depth_range: file.depth_range(),
            views: n,
        },
    )?;
    println!("wrote {n} views to {}", a.out_dir.display());
    Ok(())
}

fn load_views(scene_dir: &Path, limit: Option<usize>) -> anyhow::Result<(Vec<ImageBuffer>, Vec<Camera>)> {
    let mut images = Vec::new();
    let mut cams = Vec::new();
    for i in 0.. {
        let img_path = scene_dir.join(format!("view_{i:03}.png"));
        let cam_path = scene_dir.join(format!("cam_{i:03}.json"));
        if !img_path.exists() {
            break;
        }
        if !cam_path.exists() {
            bail!(Error::InvalidConfig {
                field: "scene_dir".into(),
                reason: format!("missing camera file {}", cam_path.display()),
            });
        }
        images.push(io::read_png(&img_path)?);
        let value: serde_json::Value = io::read_json(&cam_path)?;
        cams.push(Camera::from_json(&value)?);
        if limit.is_some_and(|n| images.len() >= n) {
            break;
        }
    }
    if images.is_empty() {
        bail!(Error::InvalidConfig {
            field: "scene_dir".into(),
            reason: format!("no view_*.png found in {}", scene_dir.display()),
        });
    }
    Ok((images, cams))
}

fn apply_ablations(config: &mut PipelineConfig, flags: &[String]) -> anyhow::Result<()> {
    for f in flags {
        match f.as_str() {
            "no-gce" => config.ablation.use_gce = false,
            "no-soft-consistency" => config.ablation.use_soft_consistency = false,
            "no-prob-volume" => config.ablation.use_prob_volume = false,
            "no-weight-loss" => config.ablation.use_weight_loss = false,
            "mvs-only" => config.skip_optimizer = true,
            other => bail!(Error::InvalidConfig {
                field: "--ablate".into(),
                reason: format!("unknown ablation '{other}'"),
            }),
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct RunMetrics {
    chamfer: Option<recon_core::eval::ChamferReport>,
    fused_points: usize,
    finest_interval: f64,
}

fn cmd_run(a: RunArgs) -> anyhow::Result<()> {
    let started_at = now_unix();
    let mut run_config: RunConfig = io::read_json(&a.config)
        .with_context(|| format!("reading config {}", a.config.display()))?;
    apply_ablations(&mut run_config.pipeline, &a.ablate)?;
    if let Some(seed) = a.seed {
        run_config.pipeline.seed = seed;
    }
    run_config.pipeline.validate()?;
    let (images, cams) = load_views(&run_config.scene_dir, run_config.views)?;
    std::fs::create_dir_all(&a.out_dir)?;

    let run = run_full(&run_config.pipeline, &images, &cams).context("pipeline run")?;

    let mut artifacts = Vec::new();
    let mut save = |p: PathBuf| {
        artifacts.push(p.clone());
        p
    };
    for (v, pv) in run.stage1_volumes.iter().enumerate() {
        io::write_pvol(&save(a.out_dir.join(format!("stage1_view_{v:03}.pvol"))), pv)?;
    }
    for (s, depths) in run.stage_depths.iter().enumerate() {
        for (v, dm) in depths.iter().enumerate() {
            io::write_pfm(
                &save(a.out_dir.join(format!("stage{}_depth_{v:03}.pfm", s + 1))),
                &dm.depth,
            )?;
        }
    }
    if let Some(grid) = &run.grid {
        io::write_sdfg(&save(a.out_dir.join("grid.sdfg")), grid)?;
        io::write_jsonl(&save(a.out_dir.join("train_log.jsonl")), &run.trace)?;
    }
    io::write_ply(&save(a.out_dir.join("cloud.ply")), &run.cloud)?;

    // Score against ground truth when the scene provides it.
    let gt_path = run_config.scene_dir.join("gt.ply");
    let chamfer_report = if gt_path.exists() {
        let gt = io::read_ply(&gt_path)?;
        Some(chamfer(&run.cloud, &gt, None)?)
    } else {
        None
    };
    io::write_json(
        &save(a.out_dir.join("metrics.json")),
        &RunMetrics {
            chamfer: chamfer_report,
            fused_points: run.cloud.len(),
            finest_interval: run.finest_interval,
        },
    )?;

    io::write_json(
        &a.out_dir.join("manifest.json"),
        &RunManifest {
            config: a.config.clone(),
            out_dir: a.out_dir.clone(),
            seed: run_config.pipeline.seed,
            started_at,
            finished_at: now_unix(),
            artifacts,
        },
    )?;
    println!(
        "fused {} points into {}",
        run.cloud.len(),
        a.out_dir.join("cloud.ply").display()
    );
    Ok(())
}

/// Depth range covering the grid bounds as seen from a camera.
fn grid_depth_range(grid: &VoxelSdfGrid, cam: &Camera) -> [f64; 2] {
    let r = 0.5 * grid.bounds.diameter();
    let d = (cam.center() - grid.bounds.center()).norm();
    [(d - r).max(1e-3 * r.max(1e-9)), d + r]
}

fn cmd_render(a: RenderArgs) -> anyhow::Result<()> {
    let grid = io::read_sdfg(&a.grid)?;
    let cam_value: serde_json::Value = io::read_json(&a.camera)?;
    let cam = Camera::from_json(&cam_value)?;
    let range = grid_depth_range(&grid, &cam);

    let image = if a.ibr {
        if a.src_images.len() != a.src_cams.len() || a.src_images.is_empty() {
            bail!(Error::InvalidConfig {
                field: "--src-image/--src-cam".into(),
                reason: "need matching, non-empty source image and camera lists".into(),
            });
        }
        let src_images: Vec<ImageBuffer> = a
            .src_images
            .iter()
            .map(|p| io::read_png(p))
            .collect::<Result<_, _>>()?;
        let src_cams: Vec<Camera> = a
            .src_cams
            .iter()
            .map(|p| {
                let v: serde_json::Value = io::read_json(p)?;
                Camera::from_json(&v)
            })
            .collect::<Result<_, _>>()?;
        // Source depths come from the same grid the target uses.
        let src_depths: Vec<DepthMap> = src_cams
            .iter()
            .map(|c| {
                let (depth, confidence) =
                    render_depth_map(&grid, c, a.samples, grid_depth_range(&grid, c));
                DepthMap { depth, confidence }
            })
            .collect();
        let sources = IbrSources {
            cams: src_cams.iter().collect(),
            images: src_images.iter().collect(),
            depths: src_depths.iter().collect(),
        };
        synthesize_novel(&cam, &grid, &sources, range, a.samples, 20.0, 1.0, 0.01, 4)?
    } else {
        render_image(&grid, &cam, a.samples, range)
    };
    io::write_png(&a.out, &image)?;
    if let Some(depth_path) = &a.depth {
        let (depth, _) = render_depth_map(&grid, &cam, a.samples, range);
        io::write_pfm(depth_path, &depth)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ImagePairMetrics {
    psnr: f64,
    ssim: f64,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    chamfer: recon_core::eval::ChamferReport,
    images: Vec<ImagePairMetrics>,
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let recon = io::read_ply(&a.recon)?;
    let gt = io::read_ply(&a.gt)?;
    let report = chamfer(&recon, &gt, None)?;
    let mut images = Vec::new();
    for pair in a.image_pairs.chunks(2) {
        let rendered = io::read_png(&pair[0])?;
        let reference = io::read_png(&pair[1])?;
        images.push(ImagePairMetrics {
            psnr: psnr(&rendered, &reference, None)?,
            ssim: ssim(&rendered, &reference, 11, 0.01, 0.03)?,
        });
    }
    let out = EvalReport {
        chamfer: report,
        images,
    };
    match &a.out {
        Some(p) => io::write_json(p, &out)?,
        None => println!("{}", serde_json::to_string_pretty(&out)?),
    }
    Ok(())
}
