//! `densba`: scene simulation, SLAM runs, sweeps and trajectory evaluation.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use config::ConfigArgs;
use densba_core::eval::{ate, pose_error};
use densba_core::experiment::{final_graph, run_on_scene, sweep, sweep_csv, ExperimentError};
use densba_core::{AlignMode, SweepAxis, SyntheticScene, Trajectory};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "densba", version, about = "Dense bundle adjustment experiments on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a scene and write it to a replayable file.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output scene file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the system on a scene file and write trajectories and metrics.
    Run {
        /// Scene file written by `simulate`.
        scene: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment per value of a configuration axis and emit CSV.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Axis to vary.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values; may be empty.
        #[arg(long, default_value = "")]
        values: String,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Absolute trajectory error between two TUM files.
    Eval {
        /// Estimated trajectory.
        estimate: PathBuf,
        /// Ground-truth trajectory.
        ground_truth: PathBuf,
    },
    /// Run on a scene file and dump the final frame graph as JSON.
    GraphDump {
        scene: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Write the dump here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Numerical(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.into())
        } else {
            Failure::Usage(e.into())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Simulate { config, out } => simulate(&config, &out),
        Command::Run { scene, config, out } => run(&scene, &config, &out),
        Command::Sweep { config, axis, values, out } => run_sweep(&config, axis, &values, out.as_deref()),
        Command::Eval { estimate, ground_truth } => eval(&estimate, &ground_truth),
        Command::GraphDump { scene, config, out } => graph_dump(&scene, &config, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("numerical failure: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[derive(Serialize)]
struct FlowStats {
    frames: usize,
    seed: u64,
    flow_min: f64,
    flow_mean: f64,
    flow_max: f64,
    band: [f64; 2],
}

fn simulate(args: &ConfigArgs, out: &Path) -> Result<(), Failure> {
    let cfg = args.load()?;
    let scene = cfg.generate_scene()?;
    scene.save(out).with_context(|| format!("writing {}", out.display()))?;
    let flows = scene.consecutive_flows();
    let stats = FlowStats {
        frames: scene.len(),
        seed: scene.seed,
        flow_min: flows.iter().copied().fold(f64::INFINITY, f64::min),
        flow_mean: flows.iter().sum::<f64>() / flows.len() as f64,
        flow_max: flows.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        band: [cfg.scene.flow_min, cfg.scene.flow_max],
    };
    println!("{}", serde_json::to_string(&stats).map_err(anyhow::Error::from)?);
    Ok(())
}

fn load_scene(path: &Path) -> anyhow::Result<SyntheticScene> {
    SyntheticScene::load(path).map_err(|e| anyhow!("{e}"))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct Trace<'a> {
    error: String,
    stats: &'a densba_core::slam::RunStats,
}

fn run(scene_path: &Path, args: &ConfigArgs, out: &Path) -> Result<(), Failure> {
    let cfg = args.load()?;
    let scene = load_scene(scene_path)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let outcome = match run_on_scene(&cfg, &scene) {
        Ok(o) => o,
        Err(ExperimentError::Run(failure)) => {
            let trace = Trace {
                error: failure.error.to_string(),
                stats: &failure.stats,
            };
            write_json(&out.join("trace.json"), &trace)?;
            return Err(ExperimentError::Run(failure).into());
        }
        Err(e) => return Err(e.into()),
    };
    let tum = |name: &str, t: &Trajectory| -> anyhow::Result<()> {
        let path = out.join(name);
        t.save_tum(&path).map_err(|e| anyhow!("writing {}: {e}", path.display()))
    };
    tum("estimate.tum", &outcome.estimate)?;
    tum("groundtruth.tum", &outcome.ground_truth)?;
    write_json(&out.join("metrics.json"), &outcome.metrics)?;
    write_json(&out.join("timing.json"), &outcome.timing)?;
    let m = &outcome.metrics;
    println!(
        "mode={} frames={} keyframes={} edges={} ate_se3={:.6e} ate_sim3={:.6e} pose_error={:.6e} wall_time_s={:.3}",
        m.mode.as_str(),
        m.frames,
        m.keyframes,
        m.edges,
        m.ate_se3,
        m.ate_sim3,
        m.pose_error,
        outcome.timing.wall_time_s
    );
    Ok(())
}

fn run_sweep(args: &ConfigArgs, axis: SweepAxis, values: &str, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = args.load()?;
    let values: Vec<String> = values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    for v in &values {
        axis.apply(&cfg, v)?;
    }
    let csv = sweep_csv(&sweep(&cfg, axis, &values));
    match out {
        Some(path) => fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    associations: usize,
    ate_se3: f64,
    ate_sim3: f64,
    sim3_scale: f64,
    pose_error: f64,
}

fn eval(est_path: &Path, gt_path: &Path) -> Result<(), Failure> {
    let load = |p: &Path| Trajectory::load_tum(p).map_err(|e| anyhow!("{}: {e}", p.display()));
    let est = load(est_path)?;
    let gt = load(gt_path)?;
    let numerical = |e: densba_core::EvalError| Failure::from(ExperimentError::Eval(e));
    let se3 = ate(&est, &gt, AlignMode::Se3).map_err(numerical)?;
    let sim3 = ate(&est, &gt, AlignMode::Sim3).map_err(numerical)?;
    let report = EvalReport {
        associations: se3.associations,
        ate_se3: se3.rmse,
        ate_sim3: sim3.rmse,
        sim3_scale: sim3.scale,
        pose_error: pose_error(&est, &gt).map_err(numerical)?,
    };
    println!("{}", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?);
    Ok(())
}

fn graph_dump(scene_path: &Path, args: &ConfigArgs, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = args.load()?;
    let scene = load_scene(scene_path)?;
    let dump = final_graph(&cfg, &scene)?;
    match out {
        Some(path) => write_json(path, &dump)?,
        None => println!("{}", serde_json::to_string_pretty(&dump).map_err(anyhow::Error::from)?),
    }
    Ok(())
}
