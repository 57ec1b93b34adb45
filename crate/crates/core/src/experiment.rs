//! End-to-end experiments: scene generation, a full system run, metrics and sweeps.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval::{ate, pose_error, AlignMode, Trajectory};
use crate::oracle::{generate_scene, ConfidenceFidelity, NoiseModel, SceneConfig, SceneOracle, SyntheticScene};
use crate::graph::GraphDump;
use crate::slam::{run, BaRecord, FrameInput, Mode, Profile, RunFailure, SlamOutput, SystemConfig, SystemState};
use crate::{EvalError, SceneError, SlamError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Seed of the generated scene.
    pub scene: u64,
    /// Seed of the oracle noise.
    pub oracle: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { scene: 0, oracle: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub noise: NoiseModel,
    pub system: SystemConfig,
    pub seeds: Seeds,
    /// Damping λ emitted by the oracle for every pixel.
    pub damping: f64,
    pub profile: Profile,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            noise: NoiseModel::default(),
            system: SystemConfig::default(),
            seeds: Seeds::default(),
            damping: crate::dba::DEFAULT_DAMPING,
            profile: Profile::Single,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("run failed: {}", .0.error)]
    Run(RunFailure),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl ExperimentError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            ExperimentError::Run(f) => matches!(
                f.error,
                SlamError::Solver(_) | SlamError::Diverged { .. } | SlamError::NoCovisibleKeyframe { .. }
            ),
            ExperimentError::Eval(EvalError::Degenerate(_)) => true,
            _ => false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.scene.validate()?;
        self.noise.validate()?;
        self.system.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if !(self.damping > 0.0 && self.damping.is_finite()) {
            return Err(ExperimentError::Config("damping must be positive".into()));
        }
        if self.system.mode == Mode::Stereo && self.scene.stereo_baseline.is_none() {
            return Err(ExperimentError::Config("stereo mode needs scene.stereo_baseline".into()));
        }
        Ok(())
    }

    pub fn generate_scene(&self) -> Result<SyntheticScene, ExperimentError> {
        self.validate()?;
        Ok(generate_scene(&self.scene, self.seeds.scene)?)
    }
}

/// Metrics of one run. Contains no timing so that repeated runs are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mode: Mode,
    pub depth_weight: f64,
    pub profile: Profile,
    pub frames: usize,
    pub keyframes: usize,
    pub edges: usize,
    pub ate_se3: f64,
    pub ate_sim3: f64,
    /// Scale applied to the estimate by the Sim(3) alignment.
    pub sim3_scale: f64,
    pub pose_error: f64,
    /// Largest distance between two ground-truth camera centres.
    pub extent: f64,
    pub backend_runs: usize,
    pub removed_keyframes: Vec<usize>,
    pub ba: Vec<BaRecord>,
    pub scene_seed: u64,
    pub config: ExperimentConfig,
}

/// Wall-clock timing kept apart from [`Metrics`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub metrics: Metrics,
    pub estimate: Trajectory,
    pub ground_truth: Trajectory,
    pub output: SlamOutput,
    pub timing: Timing,
}

/// One input frame per scene frame.
pub fn scene_frames(scene: &SyntheticScene) -> Vec<FrameInput> {
    scene
        .timestamps
        .iter()
        .enumerate()
        .map(|(id, &timestamp)| FrameInput { id, timestamp })
        .collect()
}

pub fn ground_truth(scene: &SyntheticScene) -> Result<Trajectory, EvalError> {
    Trajectory::from_world_to_camera(scene.timestamps.clone(), &scene.poses)
}

/// Runs the system over `scene` with the noise, system and profile of `cfg`.
pub fn run_on_scene(cfg: &ExperimentConfig, scene: &SyntheticScene) -> Result<RunOutcome, ExperimentError> {
    cfg.noise.validate()?;
    cfg.system.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
    if cfg.system.mode == Mode::Stereo && scene.stereo.is_none() {
        return Err(ExperimentError::Config("stereo mode needs a scene with right views".into()));
    }
    let mut oracle = SceneOracle::new(scene.clone(), cfg.noise, cfg.seeds.oracle);
    oracle.damping = cfg.damping;
    let frames = scene_frames(scene);

    let start = std::time::Instant::now();
    let output = run(cfg.profile, cfg.system.clone(), &frames, &oracle).map_err(ExperimentError::Run)?;
    let wall_time_s = start.elapsed().as_secs_f64();

    let estimate = Trajectory::from_world_to_camera(output.timestamps.clone(), &output.poses)?;
    let gt = ground_truth(scene)?;
    let se3 = ate(&estimate, &gt, AlignMode::Se3)?;
    let sim3 = ate(&estimate, &gt, AlignMode::Sim3)?;
    let pose_err = pose_error(&estimate, &gt)?;

    let metrics = Metrics {
        mode: cfg.system.mode,
        depth_weight: cfg.system.depth_weight,
        profile: cfg.profile,
        frames: frames.len(),
        keyframes: output.keyframe_ids.len(),
        edges: output.edge_count,
        ate_se3: se3.rmse,
        ate_sim3: sim3.rmse,
        sim3_scale: sim3.scale,
        pose_error: pose_err,
        extent: scene.extent(),
        backend_runs: output.stats.backend_runs,
        removed_keyframes: output.stats.removed_keyframes.clone(),
        ba: output.stats.ba.clone(),
        scene_seed: scene.seed,
        config: ExperimentConfig {
            seeds: Seeds {
                scene: scene.seed,
                ..cfg.seeds
            },
            ..cfg.clone()
        },
    };
    Ok(RunOutcome {
        metrics,
        estimate,
        ground_truth: gt,
        output,
        timing: Timing { wall_time_s },
    })
}

/// Runs the single-threaded profile over `scene` and dumps the final frame graph.
pub fn final_graph(cfg: &ExperimentConfig, scene: &SyntheticScene) -> Result<GraphDump, ExperimentError> {
    cfg.noise.validate()?;
    if cfg.system.mode == Mode::Stereo && scene.stereo.is_none() {
        return Err(ExperimentError::Config("stereo mode needs a scene with right views".into()));
    }
    let mut oracle = SceneOracle::new(scene.clone(), cfg.noise, cfg.seeds.oracle);
    oracle.damping = cfg.damping;
    let mut state = SystemState::new(cfg.system.clone()).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let result = scene_frames(scene)
        .into_iter()
        .try_for_each(|f| state.ingest_frame(f, &oracle).map(|_| ()))
        .and_then(|_| state.finish(&oracle).map(|_| ()));
    result.map_err(|error| {
        ExperimentError::Run(RunFailure {
            error,
            stats: state.stats.clone(),
        })
    })?;
    Ok(state.graph.dump(&scene.intrinsics))
}

/// Generates the configured scene and runs on it.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome, ExperimentError> {
    let scene = cfg.generate_scene()?;
    run_on_scene(cfg, &scene)
}

/// Configuration parameter varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Sigma,
    OutlierFraction,
    Confidence,
    /// Number of generated frames.
    Frames,
    /// Keyframes collected before initialization.
    InitFrames,
    Mode,
    /// `local`: frontend only; `full`: periodic and final global bundle adjustment.
    Ba,
    DepthWeight,
    SceneSeed,
    OracleSeed,
    Profile,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 11] = [
        SweepAxis::Sigma,
        SweepAxis::OutlierFraction,
        SweepAxis::Confidence,
        SweepAxis::Frames,
        SweepAxis::InitFrames,
        SweepAxis::Mode,
        SweepAxis::Ba,
        SweepAxis::DepthWeight,
        SweepAxis::SceneSeed,
        SweepAxis::OracleSeed,
        SweepAxis::Profile,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::Sigma => "sigma",
            SweepAxis::OutlierFraction => "outlier_fraction",
            SweepAxis::Confidence => "confidence",
            SweepAxis::Frames => "frames",
            SweepAxis::InitFrames => "init_frames",
            SweepAxis::Mode => "mode",
            SweepAxis::Ba => "ba",
            SweepAxis::DepthWeight => "depth_weight",
            SweepAxis::SceneSeed => "scene_seed",
            SweepAxis::OracleSeed => "oracle_seed",
            SweepAxis::Profile => "profile",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(&self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig, ExperimentError> {
        fn num<T: FromStr>(axis: SweepAxis, v: &str) -> Result<T, ExperimentError> {
            v.trim()
                .parse()
                .map_err(|_| ExperimentError::Config(format!("invalid value {v:?} for axis {axis}")))
        }
        let mut cfg = base.clone();
        match self {
            SweepAxis::Sigma => cfg.noise.sigma = num(*self, value)?,
            SweepAxis::OutlierFraction => cfg.noise.outlier_fraction = num(*self, value)?,
            SweepAxis::Confidence => {
                cfg.noise.confidence = match value.trim() {
                    "oracle_true" | "oracle-true" => ConfidenceFidelity::OracleTrue,
                    "constant" => ConfidenceFidelity::Constant,
                    "adversarial" => ConfidenceFidelity::Adversarial,
                    other => return Err(ExperimentError::Config(format!("unknown confidence {other:?}"))),
                }
            }
            SweepAxis::Frames => cfg.scene.frames = num(*self, value)?,
            SweepAxis::InitFrames => cfg.system.init_frame_count = num(*self, value)?,
            SweepAxis::Mode => cfg.system.mode = value.trim().parse().map_err(ExperimentError::Config)?,
            SweepAxis::Ba => match value.trim() {
                "local" => {
                    cfg.system.backend_interval = usize::MAX;
                    cfg.system.final_global_ba = false;
                }
                "full" => {
                    cfg.system.backend_interval = base.system.backend_interval.min(SystemConfig::default().backend_interval);
                    cfg.system.final_global_ba = true;
                }
                other => return Err(ExperimentError::Config(format!("unknown ba scope {other:?} (expected local or full)"))),
            },
            SweepAxis::DepthWeight => cfg.system.depth_weight = num(*self, value)?,
            SweepAxis::SceneSeed => cfg.seeds.scene = num(*self, value)?,
            SweepAxis::OracleSeed => cfg.seeds.oracle = num(*self, value)?,
            SweepAxis::Profile => cfg.profile = value.trim().parse().map_err(ExperimentError::Config)?,
        }
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().replace('-', "_");
        SweepAxis::ALL.into_iter().find(|a| a.as_str() == norm).ok_or_else(|| {
            let names: Vec<&str> = SweepAxis::ALL.iter().map(|a| a.as_str()).collect();
            format!("unknown sweep axis {s:?} (expected one of {})", names.join(", "))
        })
    }
}

/// One sweep row. Failed runs carry NaN metrics and a non-`ok` status.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub ate_sim3: f64,
    pub ate_se3: f64,
    pub pose_error: f64,
    pub status: String,
}

pub const SWEEP_HEADER: &str = "axis,value,ate_sim3,ate_se3,pose_error,status";

impl SweepRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.axis,
            csv_field(&self.value),
            self.ate_sim3,
            self.ate_se3,
            self.pose_error,
            csv_field(&self.status)
        )
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Runs `base` once per value, in parallel, and returns rows in `values` order.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Vec<SweepRow> {
    values
        .par_iter()
        .map(|value| {
            let result = axis.apply(base, value).and_then(|cfg| run_experiment(&cfg));
            match result {
                Ok(out) => SweepRow {
                    axis: axis.to_string(),
                    value: value.clone(),
                    ate_sim3: out.metrics.ate_sim3,
                    ate_se3: out.metrics.ate_se3,
                    pose_error: out.metrics.pose_error,
                    status: "ok".into(),
                },
                Err(e) => SweepRow {
                    axis: axis.to_string(),
                    value: value.clone(),
                    ate_sim3: f64::NAN,
                    ate_se3: f64::NAN,
                    pose_error: f64::NAN,
                    status: format!("error: {e}"),
                },
            }
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}
