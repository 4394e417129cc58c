use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand};
use log::info;
use rvoxelmap::geometry::transform_point;
use rvoxelmap::io::{
    ate_rmse, read_trajectory_tum, write_dataset, write_map_ply, write_trajectory_tum, Dataset, RunConfig,
    SceneKind, Trajectory,
};
use rvoxelmap::odometry::voxel_downsample;
use rvoxelmap::synthetic::{corridor_scene, generate_scene_scan, room_scene, trajectory_corridor};
use rvoxelmap::{Odometry, Pose, PoseCov, Vec3, VoxelMap, WorldPoint};

#[derive(Parser, Debug)]
#[command(name = "rvm", version, about = "Voxel-map LiDAR odometry and mapping")]
struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Process at most this many scans.
    #[arg(long, global = true, value_name = "N")]
    max_scans: Option<usize>,
    /// Output directory (defaults to the config's `output`, then `.`).
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run odometry over a dataset; writes trajectory.txt and metrics.txt.
    Odometry {
        /// Dataset directory (defaults to the config's `dataset`).
        dataset: Option<PathBuf>,
    },
    /// Build a map from scans with known poses; writes map_stats.txt and map.ply.
    BuildMap {
        dataset: Option<PathBuf>,
        /// TUM poses (defaults to the dataset's groundtruth.txt).
        #[arg(long)]
        poses: Option<PathBuf>,
    },
    /// Print the aligned ATE RMSE of an estimate against ground truth.
    Eval { estimate: PathBuf, ground_truth: PathBuf },
    /// Render a synthetic scene into a dataset directory.
    Synth,
}

struct Run {
    cfg: RunConfig,
    max_scans: Option<usize>,
    output: PathBuf,
}

impl Run {
    fn dataset(&self, arg: Option<PathBuf>) -> Result<Dataset> {
        let dir = arg
            .or_else(|| self.cfg.dataset.clone())
            .context("no dataset given on the command line or in the config")?;
        Ok(Dataset::open(&dir)?)
    }

    fn scan_count(&self, available: usize) -> usize {
        self.max_scans.map_or(available, |m| m.min(available))
    }

    fn output_file(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.output).with_context(|| format!("creating {}", self.output.display()))?;
        Ok(self.output.join(name))
    }
}

fn write_kv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k} = {v}");
    }
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn kv(pairs: &[(&str, String)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn run_odometry(run: &Run, dataset: Option<PathBuf>) -> Result<()> {
    let ds = run.dataset(dataset)?;
    let n = run.scan_count(ds.len());
    if n == 0 {
        bail!("dataset {} has no scans", ds.root().display());
    }
    let mut odo = Odometry::new(run.cfg.map.clone(), run.cfg.odometry.clone())?;
    let mut failed = 0;
    let mut ratios = Vec::new();
    let mut worst_frame_ms: f64 = 0.0;
    for k in 0..n {
        let scan = ds.scan(k)?;
        let t = Instant::now();
        let outcome = odo.process_scan(&scan, ds.times()[k])?;
        worst_frame_ms = worst_frame_ms.max(t.elapsed().as_secs_f64() * 1e3);
        if outcome.warning.is_some() {
            failed += 1;
        }
        if let Some(r) = outcome.report {
            ratios.push(r.match_ratio());
        }
        if (k + 1) % 50 == 0 {
            info!("processed {}/{n} scans", k + 1);
        }
    }

    let traj = Trajectory::from_entries(odo.trajectory().to_vec())?;
    write_trajectory_tum(&traj, &run.output_file("trajectory.txt")?)?;

    let timings = odo.timings();
    let total = timings.total.as_secs_f64();
    for (name, d) in timings.categories() {
        info!(
            "timing category=\"{name}\" total_ms={:.1} per_scan_ms={:.3} share={:.1}%",
            d.as_secs_f64() * 1e3,
            d.as_secs_f64() * 1e3 / n as f64,
            100.0 * d.as_secs_f64() / total.max(f64::MIN_POSITIVE)
        );
    }
    let summary = odo.map().summary();
    let mean_ratio = if ratios.is_empty() { 0.0 } else { ratios.iter().sum::<f64>() / ratios.len() as f64 };
    let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let mut metrics = kv(&[
        ("scans", n.to_string()),
        ("failed_updates", failed.to_string()),
        ("mean_match_ratio", format!("{mean_ratio:.4}")),
        ("min_match_ratio", format!("{:.4}", if ratios.is_empty() { 0.0 } else { min_ratio })),
        ("total_s", format!("{total:.3}")),
        ("mean_frame_ms", format!("{:.3}", total * 1e3 / n as f64)),
        ("max_frame_ms", format!("{worst_frame_ms:.3}")),
        ("map_voxels", summary.voxels.to_string()),
        ("map_planes", summary.planes.to_string()),
    ]);
    for (name, d) in timings.categories() {
        metrics.push((format!("{}_ms", name.replace(' ', "_").to_lowercase()), format!("{:.3}", d.as_secs_f64() * 1e3)));
    }
    if let Some(gt) = ds.ground_truth() {
        match ate_rmse(&traj, gt) {
            Ok(ate) => {
                info!("ATE {ate:.3} m over {n} scans");
                metrics.push(("ate_rmse".into(), format!("{ate:.6}")));
            }
            Err(e) => log::warn!("ground truth present but not comparable: {e}"),
        }
    }
    write_kv(&run.output_file("metrics.txt")?, &metrics)?;
    info!("{n} scans, {failed} failed updates, mean match ratio {mean_ratio:.3}");
    Ok(())
}

fn run_build_map(run: &Run, dataset: Option<PathBuf>, poses: Option<PathBuf>) -> Result<()> {
    let ds = run.dataset(dataset)?;
    let traj = match poses {
        Some(p) => read_trajectory_tum(&p)?,
        None => ds
            .ground_truth()
            .cloned()
            .context("no --poses given and the dataset has no groundtruth.txt")?,
    };
    let n = run.scan_count(ds.len());
    if traj.len() < n {
        bail!("{} poses for {n} scans", traj.len());
    }
    let mut map = VoxelMap::new(run.cfg.map.clone())?;
    let noise = run.cfg.odometry.sensor_noise;
    let start = Instant::now();
    for k in 0..n {
        let pose = traj.entries()[k].1;
        let pts = voxel_downsample(&ds.scan(k)?, run.cfg.odometry.downsample);
        let world: Vec<WorldPoint> = pts
            .iter()
            .map(|p| transform_point(p, &noise.covariance(p), &pose, &PoseCov::zero()))
            .collect();
        map.insert_scan(&world);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let summary = map.summary();
    let stats = map.stats();
    let mut depths = [0usize; 8];
    for (_, depth, _) in map.planes() {
        depths[(depth as usize).min(7)] += 1;
    }
    let mut pairs = kv(&[
        ("scans", n.to_string()),
        ("voxels", summary.voxels.to_string()),
        ("planes", summary.planes.to_string()),
        ("points", summary.points.to_string()),
        ("builds", stats.builds.to_string()),
        ("rebuilds", stats.rebuilds.to_string()),
        ("evictions", stats.evictions.to_string()),
        ("total_s", format!("{elapsed:.3}")),
        ("ransac_ms", format!("{:.3}", stats.timings.ransac.as_secs_f64() * 1e3)),
        ("plane_check_ms", format!("{:.3}", stats.timings.plane_check.as_secs_f64() * 1e3)),
        ("plane_param_update_ms", format!("{:.3}", stats.timings.plane_update.as_secs_f64() * 1e3)),
    ]);
    for (depth, count) in depths.iter().enumerate().filter(|(_, c)| **c > 0) {
        pairs.push((format!("planes_depth{depth}"), count.to_string()));
    }
    write_kv(&run.output_file("map_stats.txt")?, &pairs)?;
    write_map_ply(&run.output_file("map.ply")?, &map)?;
    info!(
        "map: {} voxels, {} planes, {} points from {n} scans in {elapsed:.2} s",
        summary.voxels, summary.planes, summary.points
    );
    Ok(())
}

fn run_eval(estimate: &Path, ground_truth: &Path) -> Result<()> {
    let est = read_trajectory_tum(estimate)?;
    let gt = read_trajectory_tum(ground_truth)?;
    let ate = ate_rmse(&est, &gt)?;
    println!("ATE {ate:.3}");
    Ok(())
}

fn run_synth(run: &Run) -> Result<()> {
    let s = &run.cfg.synth;
    let seed = run.cfg.map.seed;
    let scans = run.scan_count(s.scans).max(2);
    let (spec, poses) = match s.scene {
        SceneKind::Corridor => (
            corridor_scene(s.length, s.outliers, s.noise, seed),
            trajectory_corridor(s.length, scans),
        ),
        SceneKind::Room => {
            let half = 0.5 * s.length;
            let spec = room_scene(
                Vec3::new(-half - 2.0, -4.0, -1.5),
                Vec3::new(half + 2.0, 4.0, 2.5),
                s.outliers,
                s.noise,
                seed,
            );
            let shift = Pose::new(rvoxelmap::Mat3::identity(), Vec3::new(-half, 0.0, 0.0));
            let poses = trajectory_corridor(s.length, scans).iter().map(|p| shift.compose(p)).collect();
            (spec, poses)
        }
    };
    spec.validate()?;
    let mut clouds = Vec::with_capacity(scans);
    let mut gt = Trajectory::new();
    let mut times = Vec::with_capacity(scans);
    for (k, pose) in poses.iter().enumerate() {
        let t = 0.1 * k as f64;
        clouds.push(generate_scene_scan(&spec, pose, s.rays)?.points);
        gt.push(t, *pose)?;
        times.push(t);
    }
    std::fs::create_dir_all(&run.output).with_context(|| format!("creating {}", run.output.display()))?;
    write_dataset(&run.output, &clouds, &times, Some(&gt))?;
    info!("wrote {scans} scans of {} rays to {}", s.rays, run.output.display());
    Ok(())
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RVM_LOG", "info")).init();

    if let Command::Eval { estimate, ground_truth } = &cli.command {
        return match run_eval(estimate, ground_truth) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        };
    }

    let Some(config_path) = cli.config.as_deref() else {
        return usage_error("--config is required");
    };
    if !config_path.is_file() {
        return usage_error(&format!("config file {} not found", config_path.display()));
    }
    let mut cfg = match RunConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.map.seed = seed;
    }
    let output = cli.output.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("."));
    let run = Run {
        cfg,
        max_scans: cli.max_scans,
        output,
    };
    let result = match cli.command {
        Command::Odometry { dataset } => run_odometry(&run, dataset),
        Command::BuildMap { dataset, poses } => run_build_map(&run, dataset, poses),
        Command::Synth => run_synth(&run),
        Command::Eval { .. } => unreachable!("handled above"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
