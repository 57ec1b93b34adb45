//! The full system: motion filtering, initialization, frontend tracking,
//! backend global bundle adjustment and non-keyframe recovery.
//!
//! Poses are world-to-camera throughout. Keyframes are identified by the
//! index of their input frame.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::camera::InverseDepthMap;
use crate::correspondence::{PixelGrid, MIN_COVISIBLE_FRACTION};
use crate::dba::{BAProblem, EdgeObservation};
use crate::error::SlamError;
use crate::graph::{directed, sample_backend_edges, FrameGraph, Keyframe};
use crate::oracle::{FlowOracle, ViewId};
use crate::se3::PoseSE3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Mono,
    Stereo,
    Rgbd,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Mono => "mono",
            Mode::Stereo => "stereo",
            Mode::Rgbd => "rgbd",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mono" => Ok(Mode::Mono),
            "stereo" => Ok(Mode::Stereo),
            "rgbd" => Ok(Mode::Rgbd),
            other => Err(format!("unknown mode {other:?} (expected mono, stereo or rgbd)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Collecting,
    Initialized,
    Tracking,
}

impl Phase {
    fn name(&self) -> &'static str {
        match self {
            Phase::Collecting => "collecting",
            Phase::Initialized => "initialized",
            Phase::Tracking => "tracking",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub init_frame_count: usize,
    pub init_flow_threshold: f64,
    pub init_edge_window: usize,
    pub init_iters: usize,
    pub frontend_iters: usize,
    pub frontend_neighbors: usize,
    /// Most recent keyframes optimized by the frontend.
    pub frontend_window: usize,
    pub removal_threshold: f64,
    /// Keyframes kept before removal starts.
    pub retention_window: usize,
    pub backend_iters: usize,
    /// Keyframes added between backend runs in the single-threaded profile.
    pub backend_interval: usize,
    /// Backend edge budget per keyframe (directed edges).
    pub backend_edges_per_keyframe: usize,
    /// Global bundle adjustment after the last frame.
    pub final_global_ba: bool,
    pub recover_iters: usize,
    pub motion_iters: usize,
    pub mode: Mode,
    pub depth_weight: f64,
    /// Inverse depth given to the first frames.
    pub initial_depth: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            init_frame_count: 12,
            init_flow_threshold: 16.0,
            init_edge_window: 3,
            init_iters: 10,
            frontend_iters: 4,
            frontend_neighbors: 3,
            frontend_window: 8,
            removal_threshold: 16.0,
            retention_window: 64,
            backend_iters: 8,
            backend_interval: 10,
            backend_edges_per_keyframe: 16,
            final_global_ba: true,
            recover_iters: 8,
            motion_iters: 6,
            mode: Mode::Mono,
            depth_weight: 10.0,
            initial_depth: 1.0,
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<(), SlamError> {
        let counts = [
            ("init_frame_count", self.init_frame_count),
            ("init_edge_window", self.init_edge_window),
            ("init_iters", self.init_iters),
            ("frontend_iters", self.frontend_iters),
            ("frontend_neighbors", self.frontend_neighbors),
            ("frontend_window", self.frontend_window),
            ("backend_iters", self.backend_iters),
            ("backend_interval", self.backend_interval),
            ("backend_edges_per_keyframe", self.backend_edges_per_keyframe),
            ("recover_iters", self.recover_iters),
            ("motion_iters", self.motion_iters),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(SlamError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.init_frame_count < 2 {
            return Err(SlamError::InvalidConfig("init_frame_count must be at least 2".into()));
        }
        if self.retention_window < self.frontend_window.max(3) {
            return Err(SlamError::InvalidConfig(
                "retention_window must hold the frontend window and at least 3 keyframes".into(),
            ));
        }
        for (name, v) in [
            ("init_flow_threshold", self.init_flow_threshold),
            ("removal_threshold", self.removal_threshold),
            ("initial_depth", self.initial_depth),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SlamError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(self.depth_weight >= 0.0 && self.depth_weight.is_finite()) {
            return Err(SlamError::InvalidConfig("depth_weight must be non-negative".into()));
        }
        Ok(())
    }

    fn gauge_size(&self) -> usize {
        match self.mode {
            Mode::Stereo => 1,
            Mode::Mono | Mode::Rgbd => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameInput {
    pub id: usize,
    pub timestamp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NonKeyframe {
    pub id: usize,
    pub timestamp: f64,
    /// Current guess, refined by [`SystemState::recover_non_keyframes`].
    pub pose: PoseSE3,
    /// Set for removed keyframes, whose pose was already optimized.
    pub was_keyframe: bool,
}

/// Cost trace of one bundle adjustment invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaRecord {
    pub stage: String,
    pub keyframes: usize,
    pub edges: usize,
    pub costs: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub ba: Vec<BaRecord>,
    pub removed_keyframes: Vec<usize>,
    pub backend_runs: usize,
    pub max_keyframes: usize,
}

/// Result of ingesting one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ingested {
    Keyframe,
    Skipped,
}

#[derive(Clone, Debug)]
pub struct SystemState {
    pub graph: FrameGraph,
    pub non_keyframes: Vec<NonKeyframe>,
    pub phase: Phase,
    pub config: SystemConfig,
    /// Keyframe ids held fixed in every solve.
    pub gauge: Vec<usize>,
    pub stats: RunStats,
    /// Modification counter per keyframe, used to merge backend results.
    pub versions: BTreeMap<usize, u64>,
    last_timestamp: Option<f64>,
    since_backend: usize,
}

/// Full estimated trajectory, one entry per ingested frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SlamOutput {
    pub ids: Vec<usize>,
    pub timestamps: Vec<f64>,
    pub poses: Vec<PoseSE3>,
    pub keyframe_ids: Vec<usize>,
    pub edge_count: usize,
    pub stats: RunStats,
}

/// Mean `‖p* − p‖` over valid pixels, or `+∞` when the views barely overlap.
pub fn observed_flow(obs: &EdgeObservation) -> f64 {
    if obs.overlap() < MIN_COVISIBLE_FRACTION {
        return f64::INFINITY;
    }
    let grid = PixelGrid::new(obs.width, obs.height);
    let (sum, n) = obs
        .targets
        .iter()
        .zip(&obs.valid)
        .enumerate()
        .filter(|(_, (_, ok))| **ok)
        .fold((0.0, 0usize), |(s, n), (k, (t, _))| (s + (t - grid.point(k)).norm(), n + 1));
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

/// A bundle adjustment problem over keyframes, with the mapping back to ids.
struct KeyframeProblem {
    ids: Vec<usize>,
    problem: BAProblem,
    stereo: bool,
}

impl KeyframeProblem {
    fn local_left(&self, pos: usize) -> usize {
        if self.stereo {
            2 * pos
        } else {
            pos
        }
    }
}

/// Builds a problem over `ids`. Edges are id pairs; edges whose source is not in
/// `sources` are dropped so that only source depths are optimized.
fn build_problem(
    graph: &FrameGraph,
    config: &SystemConfig,
    oracle: &dyn FlowOracle,
    ids: &[usize],
    edges: &[(usize, usize)],
    sources: &BTreeSet<usize>,
    fixed: &BTreeSet<usize>,
) -> Result<KeyframeProblem, SlamError> {
    let stereo = config.mode == Mode::Stereo;
    let extrinsic = if stereo {
        Some(
            oracle
                .stereo_extrinsic()
                .ok_or_else(|| SlamError::InvalidConfig("stereo mode needs stereo views".into()))?,
        )
    } else {
        None
    };
    let pos: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(p, &id)| (id, p)).collect();
    let local = |id: usize, right: bool| -> usize {
        let p = pos[&id];
        if stereo {
            2 * p + right as usize
        } else {
            p
        }
    };
    let view = |id: usize, right: bool| if right { ViewId::right(id) } else { ViewId::left(id) };

    let mut poses = Vec::new();
    let mut depths = Vec::new();
    for &id in ids {
        let kf = graph.get(id).ok_or(SlamError::UnknownFrame(id))?;
        poses.push(kf.pose);
        depths.push(kf.depth.clone());
        if let Some(ext) = &extrinsic {
            poses.push(ext.compose(&kf.pose));
            depths.push(
                kf.right_depth
                    .clone()
                    .unwrap_or_else(|| InverseDepthMap::constant(kf.depth.width(), kf.depth.height(), config.initial_depth)),
            );
        }
    }

    let mut pairs: Vec<(ViewId, ViewId, usize, usize)> = Vec::new();
    for &(a, b) in edges {
        if !sources.contains(&a) || !pos.contains_key(&a) || !pos.contains_key(&b) {
            continue;
        }
        pairs.push((view(a, false), view(b, false), local(a, false), local(b, false)));
        if stereo {
            pairs.push((view(a, true), view(b, true), local(a, true), local(b, true)));
        }
    }
    if stereo {
        for &id in ids.iter().filter(|id| sources.contains(id)) {
            pairs.push((view(id, false), view(id, true), local(id, false), local(id, true)));
            pairs.push((view(id, true), view(id, false), local(id, true), local(id, false)));
        }
    }
    let observations: Vec<EdgeObservation> = {
        use rayon::prelude::*;
        pairs
            .par_iter()
            .map(|&(s, t, ls, lt)| oracle.observe(s, t, (ls, lt)))
            .collect()
    };

    let fixed_local: BTreeSet<usize> = fixed.iter().filter(|id| pos.contains_key(id)).map(|&id| local(id, false)).collect();
    let mut problem = BAProblem::new(poses, depths, oracle.intrinsics(), observations, fixed_local)?;
    problem.set_uniform_damping(oracle.damping());
    if let Some(ext) = extrinsic {
        let rig_pairs = (0..ids.len()).map(|p| (2 * p, 2 * p + 1)).collect();
        problem.bind_rig(rig_pairs, ext)?;
    }
    if config.mode == Mode::Rgbd && config.depth_weight > 0.0 {
        for &id in ids.iter().filter(|id| sources.contains(id)) {
            if let Some(sensor) = oracle.sensor_depth(ViewId::left(id)) {
                problem.add_depth_prior(local(id, false), &sensor, config.depth_weight)?;
            }
        }
    }
    Ok(KeyframeProblem { ids: ids.to_vec(), problem, stereo })
}

/// Copies solved poses and depths back into `graph`; returns the ids written.
fn write_back(graph: &mut FrameGraph, kp: &KeyframeProblem, fixed: &BTreeSet<usize>, sources: &BTreeSet<usize>) -> Vec<usize> {
    let mut written = Vec::new();
    for (p, &id) in kp.ids.iter().enumerate() {
        let l = kp.local_left(p);
        let Some(kf) = graph.get_mut(id) else { continue };
        let mut changed = false;
        if !fixed.contains(&id) {
            kf.pose = kp.problem.poses[l];
            changed = true;
        }
        if sources.contains(&id) {
            kf.depth = kp.problem.depths[l].clone();
            if kp.stereo {
                kf.right_depth = Some(kp.problem.depths[l + 1].clone());
            }
            changed = true;
        }
        if changed {
            written.push(id);
        }
    }
    written
}

/// Fixed set for a solve over `ids` connected by index `pairs`: the gauge frames,
/// padded with the oldest frames of each component until every component holds
/// `gauge_size` fixed frames (or is entirely fixed).
fn anchor_components(ids: &[usize], pairs: &[(usize, usize)], gauge: &[usize], gauge_size: usize) -> BTreeSet<usize> {
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(a, b) in pairs {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for p in 0..ids.len() {
        let root = find(&mut parent, p);
        components.entry(root).or_default().push(ids[p]);
    }
    let mut fixed: BTreeSet<usize> = gauge.iter().copied().collect();
    for members in components.values() {
        let mut count = members.iter().filter(|id| fixed.contains(id)).count();
        for id in members {
            if count >= gauge_size {
                break;
            }
            if fixed.insert(*id) {
                count += 1;
            }
        }
    }
    fixed
}

/// Global bundle adjustment over every keyframe of `graph` with backend-sampled edges.
pub fn backend_solve(
    graph: &mut FrameGraph,
    gauge: &[usize],
    config: &SystemConfig,
    oracle: &dyn FlowOracle,
    iters: usize,
    stage: &str,
) -> Result<(BaRecord, Vec<usize>), SlamError> {
    let intr = oracle.intrinsics();
    let ids = graph.ids();
    let dist = graph.build_distance_matrix(&intr);
    let pairs = sample_backend_edges(&dist, config.backend_edges_per_keyframe * ids.len());
    let edges: Vec<(usize, usize)> = directed(&pairs).into_iter().map(|(i, j)| (ids[i], ids[j])).collect();
    let sources: BTreeSet<usize> = ids.iter().copied().collect();
    let fixed = anchor_components(&ids, &pairs, gauge, config.gauge_size());
    let mut kp = build_problem(graph, config, oracle, &ids, &edges, &sources, &fixed)?;
    let costs = kp.problem.dba_iterate(iters)?;
    let written = write_back(graph, &kp, &fixed, &sources);
    Ok((
        BaRecord {
            stage: stage.to_string(),
            keyframes: ids.len(),
            edges: kp.problem.observations.len(),
            costs,
        },
        written,
    ))
}

impl SystemState {
    pub fn new(config: SystemConfig) -> Result<Self, SlamError> {
        config.validate()?;
        Ok(Self {
            graph: FrameGraph::new(),
            non_keyframes: Vec::new(),
            phase: Phase::Collecting,
            config,
            gauge: Vec::new(),
            stats: RunStats::default(),
            versions: BTreeMap::new(),
            last_timestamp: None,
            since_backend: 0,
        })
    }

    fn require(&self, phase: Phase) -> Result<(), SlamError> {
        if self.phase < phase {
            return Err(SlamError::WrongPhase {
                expected: phase.name(),
                actual: self.phase.name(),
            });
        }
        Ok(())
    }

    fn touch(&mut self, ids: &[usize]) {
        for &id in ids {
            *self.versions.entry(id).or_insert(0) += 1;
        }
    }

    fn new_keyframe(&self, id: usize, timestamp: f64, pose: PoseSE3, depth_value: f64, oracle: &dyn FlowOracle) -> Keyframe {
        let (w, h) = oracle.image_size();
        Keyframe {
            id,
            timestamp,
            pose,
            depth: InverseDepthMap::constant(w, h, depth_value),
            right_depth: (self.config.mode == Mode::Stereo).then(|| InverseDepthMap::constant(w, h, depth_value)),
        }
    }

    /// Motion filter plus dispatch to initialization or frontend tracking.
    pub fn ingest_frame(&mut self, frame: FrameInput, oracle: &dyn FlowOracle) -> Result<Ingested, SlamError> {
        self.ingest_inner(frame, oracle, true)
    }

    fn ingest_inner(&mut self, frame: FrameInput, oracle: &dyn FlowOracle, run_backend: bool) -> Result<Ingested, SlamError> {
        if let Some(prev) = self.last_timestamp {
            if !(frame.timestamp > prev) {
                return Err(SlamError::OutOfOrder {
                    prev,
                    next: frame.timestamp,
                });
            }
        }
        self.last_timestamp = Some(frame.timestamp);

        let Some(last) = self.graph.keyframes.last().cloned() else {
            let kf = self.new_keyframe(frame.id, frame.timestamp, PoseSE3::identity(), self.config.initial_depth, oracle);
            self.graph.push(kf);
            self.touch(&[frame.id]);
            self.stats.max_keyframes = self.stats.max_keyframes.max(self.graph.len());
            return Ok(Ingested::Keyframe);
        };

        let obs = oracle.observe(ViewId::left(last.id), ViewId::left(frame.id), (0, 1));
        let flow = observed_flow(&obs);
        if flow <= self.config.init_flow_threshold {
            self.non_keyframes.push(NonKeyframe {
                id: frame.id,
                timestamp: frame.timestamp,
                pose: last.pose,
                was_keyframe: false,
            });
            return Ok(Ingested::Skipped);
        }

        match self.phase {
            Phase::Collecting => {
                let pose = self.seed_by_motion(&last, obs, oracle);
                let kf = self.new_keyframe(frame.id, frame.timestamp, pose, self.config.initial_depth, oracle);
                self.graph.push(kf);
                self.touch(&[frame.id]);
                if self.graph.len() >= self.config.init_frame_count {
                    self.initialize(oracle)?;
                }
            }
            Phase::Initialized | Phase::Tracking => {
                self.frontend_track(frame, oracle)?;
                self.since_backend += 1;
                if run_backend && self.since_backend >= self.config.backend_interval {
                    self.backend_global_ba(oracle)?;
                }
            }
        }
        self.stats.max_keyframes = self.stats.max_keyframes.max(self.graph.len());
        Ok(Ingested::Keyframe)
    }

    /// Pose of a new frame by motion-only alignment against `prev` at constant depth.
    fn seed_by_motion(&self, prev: &Keyframe, obs: EdgeObservation, oracle: &dyn FlowOracle) -> PoseSE3 {
        let depth = InverseDepthMap::constant(prev.depth.width(), prev.depth.height(), self.config.initial_depth);
        let seeded = BAProblem::new(
            vec![prev.pose, prev.pose],
            vec![depth.clone(), depth],
            oracle.intrinsics(),
            vec![obs],
            BTreeSet::from([0]),
        )
        .and_then(|mut p| {
            p.set_uniform_damping(oracle.damping());
            p.motion_only_ba(self.config.motion_iters)?;
            Ok(p.poses[1])
        });
        match seeded {
            Ok(g) if g.is_finite() => g,
            _ => prev.pose,
        }
    }

    /// Edges within the initialization window, fixed gauge, then `init_iters` iterations.
    pub fn initialize(&mut self, oracle: &dyn FlowOracle) -> Result<(), SlamError> {
        if self.phase != Phase::Collecting {
            return Err(SlamError::WrongPhase {
                expected: Phase::Collecting.name(),
                actual: self.phase.name(),
            });
        }
        let ids = self.graph.ids();
        if ids.len() < 2 {
            return Err(SlamError::InvalidConfig("initialization needs at least two keyframes".into()));
        }
        let w = self.config.init_edge_window;
        for a in 0..ids.len() {
            for b in 0..ids.len() {
                if a != b && a.abs_diff(b) <= w {
                    self.graph.add_edge(ids[a], ids[b]);
                }
            }
        }
        let edges: Vec<_> = self.graph.edges.iter().copied().collect();
        let sources: BTreeSet<usize> = ids.iter().copied().collect();
        let gauge: Vec<usize> = ids[..self.config.gauge_size()].to_vec();

        let mut stages: Vec<(&str, BTreeSet<usize>)> = Vec::new();
        if gauge.len() > 1 {
            // The second gauge pose is only trustworthy once it has been refined with the first held fixed.
            stages.push(("bootstrap", BTreeSet::from([gauge[0]])));
        }
        stages.push(("init", gauge.iter().copied().collect()));
        for (stage, fixed) in stages {
            let mut kp = build_problem(&self.graph, &self.config, oracle, &ids, &edges, &sources, &fixed)?;
            let costs = kp.problem.dba_iterate(self.config.init_iters)?;
            let (first, last) = (costs[0], *costs.last().unwrap());
            if !last.is_finite() || last > 10.0 * first.max(f64::MIN_POSITIVE) {
                return Err(SlamError::Diverged { initial: first, last });
            }
            let written = write_back(&mut self.graph, &kp, &fixed, &sources);
            self.touch(&written);
            self.stats.ba.push(BaRecord {
                stage: stage.to_string(),
                keyframes: ids.len(),
                edges: kp.problem.observations.len(),
                costs,
            });
        }
        self.gauge = gauge;
        self.phase = Phase::Initialized;
        Ok(())
    }

    /// `(G_last ∘ G_prev⁻¹) ∘ G_last` from the two newest keyframes.
    pub fn constant_velocity_seed(&self) -> Option<PoseSE3> {
        let n = self.graph.len();
        if n < 2 {
            return None;
        }
        let last = &self.graph.keyframes[n - 1].pose;
        let prev = &self.graph.keyframes[n - 2].pose;
        Some(last.compose(&prev.inverse()).compose(last))
    }

    /// Adds a keyframe seeded by constant velocity, links it to its nearest
    /// keyframes and optimizes the recent window.
    pub fn frontend_track(&mut self, frame: FrameInput, oracle: &dyn FlowOracle) -> Result<(), SlamError> {
        self.require(Phase::Initialized)?;
        let intr = oracle.intrinsics();
        let n = self.graph.len();
        let last = &self.graph.keyframes[n - 1];
        let pose = self.constant_velocity_seed().unwrap_or(last.pose);
        let depth_value = last.depth.mean();
        let last_id = last.id;
        let kf = self.new_keyframe(frame.id, frame.timestamp, pose, depth_value, oracle);
        self.graph.push(kf);
        self.touch(&[frame.id]);

        let added = self.graph.proximity_edges(frame.id, self.config.frontend_neighbors, &intr);
        if added.is_empty() {
            self.graph.add_edge(frame.id, last_id);
            self.graph.add_edge(last_id, frame.id);
        }

        let ids = self.graph.ids();
        let recent: BTreeSet<usize> = ids.iter().rev().take(self.config.frontend_window).copied().collect();
        let mut window: BTreeSet<usize> = recent.clone();
        for &r in &recent {
            window.extend(self.graph.neighbors(r));
        }
        let mut fixed: BTreeSet<usize> = window.difference(&recent).copied().collect();
        fixed.extend(self.gauge.iter().filter(|g| window.contains(g)));
        for &id in &recent {
            if fixed.len() >= self.config.gauge_size() {
                break;
            }
            fixed.insert(id);
        }
        let window_ids: Vec<usize> = window.iter().copied().collect();
        let edges: Vec<(usize, usize)> = self
            .graph
            .edges
            .iter()
            .copied()
            .filter(|(a, b)| recent.contains(a) && window.contains(b))
            .collect();
        let mut kp = build_problem(&self.graph, &self.config, oracle, &window_ids, &edges, &recent, &fixed)?;
        let costs = kp.problem.dba_iterate(self.config.frontend_iters)?;
        let written = write_back(&mut self.graph, &kp, &fixed, &recent);
        self.touch(&written);
        self.stats.ba.push(BaRecord {
            stage: "frontend".into(),
            keyframes: window_ids.len(),
            edges: kp.problem.observations.len(),
            costs,
        });
        self.phase = Phase::Tracking;

        while let Some(removed) =
            self.graph
                .keyframe_removal(self.config.removal_threshold, self.config.retention_window, &self.gauge, &intr)
        {
            self.stats.removed_keyframes.push(removed.id);
            self.versions.remove(&removed.id);
            self.non_keyframes.push(NonKeyframe {
                id: removed.id,
                timestamp: removed.timestamp,
                pose: removed.pose,
                was_keyframe: true,
            });
        }
        Ok(())
    }

    /// Rebuilds edges from the distance matrix and optimizes every keyframe.
    pub fn backend_global_ba(&mut self, oracle: &dyn FlowOracle) -> Result<(), SlamError> {
        self.run_backend(oracle, "backend")
    }

    fn run_backend(&mut self, oracle: &dyn FlowOracle, stage: &str) -> Result<(), SlamError> {
        self.require(Phase::Initialized)?;
        let (record, written) = backend_solve(&mut self.graph, &self.gauge, &self.config, oracle, self.config.backend_iters, stage)?;
        self.touch(&written);
        self.stats.ba.push(record);
        self.stats.backend_runs += 1;
        self.since_backend = 0;
        Ok(())
    }

    /// Replaces poses and depths with backend results, skipping keyframes whose
    /// version changed since `snapshot_versions` was taken. Returns the ids replaced.
    pub fn merge_backend(&mut self, snapshot_versions: &BTreeMap<usize, u64>, solved: &FrameGraph) -> Vec<usize> {
        let mut merged = Vec::new();
        for kf in &solved.keyframes {
            let unchanged = snapshot_versions.get(&kf.id).is_some_and(|v| self.versions.get(&kf.id) == Some(v));
            if !unchanged {
                continue;
            }
            if let Some(cur) = self.graph.get_mut(kf.id) {
                cur.pose = kf.pose;
                cur.depth = kf.depth.clone();
                cur.right_depth = kf.right_depth.clone();
                merged.push(kf.id);
            }
        }
        self.touch(&merged);
        merged
    }

    /// Motion-only alignment of every non-keyframe against its neighboring keyframes.
    pub fn recover_non_keyframes(&mut self, oracle: &dyn FlowOracle) -> Result<(), SlamError> {
        let intr = oracle.intrinsics();
        let kf_ids = self.graph.ids();
        for nk in self.non_keyframes.iter_mut() {
            let after = kf_ids.partition_point(|&k| k < nk.id);
            let mut anchors: Vec<usize> = Vec::new();
            if after > 0 {
                anchors.push(kf_ids[after - 1]);
            }
            if after < kf_ids.len() {
                anchors.push(kf_ids[after]);
            }
            let mut poses = Vec::new();
            let mut depths = Vec::new();
            let mut observations = Vec::new();
            for &a in &anchors {
                let kf = self.graph.get(a).expect("anchor is a keyframe");
                let obs = oracle.observe(ViewId::left(a), ViewId::left(nk.id), (poses.len(), anchors.len()));
                if obs.overlap() < MIN_COVISIBLE_FRACTION {
                    continue;
                }
                let mut obs = obs;
                obs.source = poses.len();
                poses.push(kf.pose);
                depths.push(kf.depth.clone());
                observations.push(obs);
            }
            if observations.is_empty() {
                if nk.was_keyframe {
                    continue;
                }
                return Err(SlamError::NoCovisibleKeyframe { frame: nk.id });
            }
            let target = poses.len();
            for obs in &mut observations {
                obs.target = target;
            }
            let start = if nk.pose.is_finite() { nk.pose } else { poses[0] };
            poses.push(start);
            depths.push(depths[0].clone());
            let fixed: BTreeSet<usize> = (0..target).collect();
            let mut problem = BAProblem::new(poses, depths, intr, observations, fixed)?;
            problem.set_uniform_damping(oracle.damping());
            problem.motion_only_ba(self.config.recover_iters)?;
            nk.pose = problem.poses[target];
        }
        Ok(())
    }

    /// Finishes the run: late initialization, final global BA and non-keyframe recovery.
    pub fn finish(&mut self, oracle: &dyn FlowOracle) -> Result<SlamOutput, SlamError> {
        if self.phase == Phase::Collecting && self.graph.len() >= 2 {
            self.initialize(oracle)?;
        }
        if self.phase >= Phase::Initialized && self.config.final_global_ba {
            self.run_backend(oracle, "final")?;
        }
        self.recover_non_keyframes(oracle)?;
        Ok(self.output())
    }

    /// Trajectory over keyframes and non-keyframes, ordered by frame id.
    pub fn output(&self) -> SlamOutput {
        let mut all: Vec<(usize, f64, PoseSE3)> = self
            .graph
            .keyframes
            .iter()
            .map(|k| (k.id, k.timestamp, k.pose))
            .chain(self.non_keyframes.iter().map(|n| (n.id, n.timestamp, n.pose)))
            .collect();
        all.sort_by_key(|e| e.0);
        SlamOutput {
            ids: all.iter().map(|e| e.0).collect(),
            timestamps: all.iter().map(|e| e.1).collect(),
            poses: all.iter().map(|e| e.2).collect(),
            keyframe_ids: self.graph.ids(),
            edge_count: self.graph.edges.len(),
            stats: self.stats.clone(),
        }
    }
}

/// Execution profile of a full run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Frontend and backend interleaved on one thread; deterministic.
    #[default]
    Single,
    /// Backend on its own thread working on snapshots.
    TwoWorker,
}

impl Profile {
    pub fn as_str(&self) -> &'static str {
        match self {
            Profile::Single => "single",
            Profile::TwoWorker => "two_worker",
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(Profile::Single),
            "two_worker" | "two-worker" => Ok(Profile::TwoWorker),
            other => Err(format!("unknown profile {other:?} (expected single or two_worker)")),
        }
    }
}

/// A failed run together with the bundle adjustment trace recorded up to the failure.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct RunFailure {
    pub error: SlamError,
    pub stats: RunStats,
}

impl From<SlamError> for RunFailure {
    fn from(error: SlamError) -> Self {
        Self {
            error,
            stats: RunStats::default(),
        }
    }
}

pub fn run(profile: Profile, config: SystemConfig, frames: &[FrameInput], oracle: &dyn FlowOracle) -> Result<SlamOutput, RunFailure> {
    match profile {
        Profile::Single => run_single(config, frames, oracle),
        Profile::TwoWorker => run_two_worker(config, frames, oracle),
    }
}

/// Runs the deterministic single-threaded profile over `frames`.
pub fn run_single(config: SystemConfig, frames: &[FrameInput], oracle: &dyn FlowOracle) -> Result<SlamOutput, RunFailure> {
    let mut state = SystemState::new(config)?;
    let result = frames
        .iter()
        .try_for_each(|&f| state.ingest_frame(f, oracle).map(|_| ()))
        .and_then(|_| state.finish(oracle));
    result.map_err(|error| RunFailure {
        error,
        stats: state.stats.clone(),
    })
}

/// Runs the frontend and backend on separate threads. The backend repeatedly
/// solves a snapshot of the keyframes and merges results for frames the
/// frontend has not touched in the meantime.
pub fn run_two_worker(config: SystemConfig, frames: &[FrameInput], oracle: &dyn FlowOracle) -> Result<SlamOutput, RunFailure> {
    let state = Mutex::new(SystemState::new(config)?);
    let done = AtomicBool::new(false);
    let backend_error: Mutex<Option<SlamError>> = Mutex::new(None);

    let front = std::thread::scope(|scope| {
        scope.spawn(|| {
            while !done.load(Ordering::Acquire) {
                let snapshot = {
                    let s = state.lock().unwrap();
                    if s.phase < Phase::Initialized {
                        None
                    } else {
                        Some((s.graph.clone(), s.versions.clone(), s.gauge.clone(), s.config.clone()))
                    }
                };
                let Some((mut graph, versions, gauge, cfg)) = snapshot else {
                    std::thread::yield_now();
                    continue;
                };
                match backend_solve(&mut graph, &gauge, &cfg, oracle, cfg.backend_iters, "backend") {
                    Ok((record, _)) => {
                        let mut s = state.lock().unwrap();
                        s.merge_backend(&versions, &graph);
                        s.stats.ba.push(record);
                        s.stats.backend_runs += 1;
                    }
                    Err(e) => {
                        *backend_error.lock().unwrap() = Some(e);
                        return;
                    }
                }
            }
        });
        let result = (|| {
            for &f in frames {
                state.lock().unwrap().ingest_inner(f, oracle, false)?;
            }
            Ok::<(), SlamError>(())
        })();
        done.store(true, Ordering::Release);
        result
    });
    let mut state = state.into_inner().unwrap();
    let backend_error = backend_error.into_inner().unwrap();
    let result = front
        .and_then(|_| backend_error.map_or(Ok(()), Err))
        .and_then(|_| state.finish(oracle));
    result.map_err(|error| RunFailure {
        error,
        stats: state.stats.clone(),
    })
}
