//! Synthetic scenes with ground truth, and an oracle that emits what a learned
//! update operator would: revised correspondences, confidences, damping and
//! convex upsampling masks.
//!
//! The world is a smooth height field `Z = h(X, Y)` built from a few low
//! frequency harmonics. Cameras look roughly along `+Z`, so every pixel ray
//! hits the surface exactly once and ground-truth depth is single valued.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{InverseDepthMap, Intrinsics};
use crate::correspondence::{correspondence_from_relative, dense_correspondence, mean_flow_magnitude, PixelGrid};
use crate::dba::{EdgeObservation, DEFAULT_DAMPING};
use crate::error::SceneError;
use crate::se3::{PoseSE3, Twist};

/// Added to variances before inverting them into confidences (px²).
pub const CONFIDENCE_EPS: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub amplitude: f64,
    pub freq_x: f64,
    pub freq_y: f64,
    pub phase: f64,
}

/// Height field `Z = base + Σ a·sin(fx·X + fy·Y + φ)` in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub base: f64,
    pub harmonics: Vec<Harmonic>,
}

impl Surface {
    pub fn flat(base: f64) -> Self {
        Self {
            base,
            harmonics: Vec::new(),
        }
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.base
            + self
                .harmonics
                .iter()
                .map(|h| h.amplitude * (h.freq_x * x + h.freq_y * y + h.phase).sin())
                .sum::<f64>()
    }

    fn max_height(&self) -> f64 {
        self.base + self.harmonics.iter().map(|h| h.amplitude.abs()).sum::<f64>()
    }

    /// Distance along `dir` (scaled so the camera-frame ray has unit z) to the surface.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let f = |s: f64| origin.z + s * dir.z - self.height(origin.x + s * dir.x, origin.y + s * dir.y);
        if f(0.0) >= 0.0 || dir.z <= 0.0 {
            return None;
        }
        let mut hi = (self.max_height() - origin.z) / dir.z;
        let mut grow = 0;
        while f(hi) < 0.0 {
            hi *= 2.0;
            grow += 1;
            if grow > 60 {
                return None;
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }

    /// Inverse depth map seen by a camera with world-to-camera pose `pose`.
    pub fn render(&self, pose: &PoseSE3, intr: &Intrinsics, width: usize, height: usize) -> Result<InverseDepthMap, SceneError> {
        let inv = pose.inverse();
        let center = *inv.translation();
        let rot = inv.rotation_matrix();
        let grid = PixelGrid::new(width, height);
        let mut values = Vec::with_capacity(grid.len());
        for p in grid.points() {
            let ray_c = Vector3::new((p.x - intr.cx) / intr.fx, (p.y - intr.cy) / intr.fy, 1.0);
            let ray_w = rot * ray_c;
            let s = self
                .intersect(&center, &ray_w)
                .ok_or_else(|| SceneError::Unsatisfiable("camera ray misses the surface".into()))?;
            values.push(1.0 / s);
        }
        InverseDepthMap::new(width, height, values).map_err(|e| SceneError::Unsatisfiable(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MotionPattern {
    /// Smooth random walk parallel to the surface.
    #[default]
    Wander,
    /// Closed circular path; the last frame returns next to the first.
    Loop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub frames: usize,
    /// Optimization grid size (1/8 of the nominal image resolution).
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub flow_min: f64,
    pub flow_max: f64,
    /// Mean consecutive-frame flow the generator aims for.
    pub target_flow: f64,
    /// Largest translation allowed between consecutive frames.
    pub max_step: f64,
    /// Largest rotation increment between consecutive frames (radians).
    pub max_rotation_step: f64,
    /// Largest tilt away from looking along +Z (radians).
    pub max_tilt: f64,
    pub surface_depth: f64,
    pub surface_relief: f64,
    pub motion: MotionPattern,
    /// Stereo baseline; right views are rendered when set.
    pub stereo_baseline: Option<f64>,
    pub frame_interval: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frames: 12,
            width: 96,
            height: 72,
            focal: 75.0,
            flow_min: 8.0,
            flow_max: 96.0,
            target_flow: 20.0,
            max_step: 5.0,
            max_rotation_step: 0.02,
            max_tilt: 0.12,
            surface_depth: 3.0,
            surface_relief: 0.6,
            motion: MotionPattern::Wander,
            stereo_baseline: None,
            frame_interval: 0.1,
        }
    }
}

impl SceneConfig {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidConfig(m.to_string()));
        if self.frames < 2 {
            return bad("at least two frames are required");
        }
        if self.width < 2 || self.height < 2 {
            return bad("image must be at least 2x2");
        }
        if !(self.focal > 0.0) {
            return bad("focal length must be positive");
        }
        if !(self.surface_depth > 0.0) || !(self.surface_relief >= 0.0) || self.surface_relief >= 0.5 * self.surface_depth {
            return bad("surface relief must be below half the surface depth");
        }
        if !(self.frame_interval > 0.0) {
            return bad("frame interval must be positive");
        }
        if !(self.flow_min >= 0.0 && self.flow_min <= self.flow_max) {
            return Err(SceneError::Unsatisfiable(format!(
                "flow band [{}, {}] is empty",
                self.flow_min, self.flow_max
            )));
        }
        if !(self.target_flow >= self.flow_min && self.target_flow <= self.flow_max) {
            return Err(SceneError::Unsatisfiable(format!(
                "target flow {} outside band [{}, {}]",
                self.target_flow, self.flow_min, self.flow_max
            )));
        }
        if self.max_step <= 0.0 && self.flow_min > 0.0 {
            return Err(SceneError::Unsatisfiable("zero motion cannot produce nonzero flow".into()));
        }
        if let Some(b) = self.stereo_baseline {
            if !(b > 0.0) {
                return bad("stereo baseline must be positive");
            }
        }
        Ok(())
    }
}

/// Ground-truth camera trajectory and depth maps.
///
/// Poses map world points into each camera's frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub timestamps: Vec<f64>,
    pub poses: Vec<PoseSE3>,
    pub depths: Vec<InverseDepthMap>,
    pub surface: Surface,
    pub stereo: Option<StereoViews>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoViews {
    pub baseline: f64,
    pub right_depths: Vec<InverseDepthMap>,
}

/// Left-to-right camera transform for a horizontal baseline.
pub fn stereo_extrinsic(baseline: f64) -> PoseSE3 {
    PoseSE3::from_translation(Vector3::new(-baseline, 0.0, 0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Camera {
    Left,
    Right,
}

/// One image of the input stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ViewId {
    pub frame: usize,
    pub camera: Camera,
}

impl ViewId {
    pub fn left(frame: usize) -> Self {
        Self {
            frame,
            camera: Camera::Left,
        }
    }

    pub fn right(frame: usize) -> Self {
        Self {
            frame,
            camera: Camera::Right,
        }
    }
}

impl SyntheticScene {
    /// Renders ground-truth depth for an arbitrary trajectory over `surface`.
    pub fn from_poses(
        poses: Vec<PoseSE3>,
        surface: Surface,
        intrinsics: Intrinsics,
        width: usize,
        height: usize,
        frame_interval: f64,
        stereo_baseline: Option<f64>,
    ) -> Result<Self, SceneError> {
        let depths = poses
            .iter()
            .map(|g| surface.render(g, &intrinsics, width, height))
            .collect::<Result<Vec<_>, _>>()?;
        let stereo = match stereo_baseline {
            Some(b) => {
                let ext = stereo_extrinsic(b);
                let right_depths = poses
                    .iter()
                    .map(|g| surface.render(&ext.compose(g), &intrinsics, width, height))
                    .collect::<Result<Vec<_>, _>>()?;
                Some(StereoViews {
                    baseline: b,
                    right_depths,
                })
            }
            None => None,
        };
        Ok(Self {
            seed: 0,
            width,
            height,
            intrinsics,
            timestamps: (0..poses.len()).map(|k| k as f64 * frame_interval).collect(),
            poses,
            depths,
            surface,
            stereo,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn pose(&self, view: ViewId) -> PoseSE3 {
        match view.camera {
            Camera::Left => self.poses[view.frame],
            Camera::Right => {
                let s = self.stereo.as_ref().expect("scene has no stereo views");
                stereo_extrinsic(s.baseline).compose(&self.poses[view.frame])
            }
        }
    }

    pub fn depth(&self, view: ViewId) -> &InverseDepthMap {
        match view.camera {
            Camera::Left => &self.depths[view.frame],
            Camera::Right => &self.stereo.as_ref().expect("scene has no stereo views").right_depths[view.frame],
        }
    }

    /// Mean ground-truth flow from frame `k` to frame `k + 1`, for every consecutive pair.
    pub fn consecutive_flows(&self) -> Vec<f64> {
        (0..self.len().saturating_sub(1))
            .map(|k| mean_flow_magnitude(&self.poses[k], &self.poses[k + 1], &self.depths[k], &self.intrinsics))
            .collect()
    }

    /// Largest distance between two camera centers.
    pub fn extent(&self) -> f64 {
        let centers: Vec<_> = self.poses.iter().map(|g| *g.inverse().translation()).collect();
        let mut best: f64 = 0.0;
        for a in &centers {
            for b in &centers {
                best = best.max((a - b).norm());
            }
        }
        best
    }

    pub fn to_json(&self) -> Result<String, SceneError> {
        serde_json::to_string(self).map_err(|e| SceneError::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, SceneError> {
        let scene: Self = serde_json::from_str(s).map_err(|e| SceneError::Format(e.to_string()))?;
        scene.check()?;
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<(), SceneError> {
        let mut f = std::fs::File::create(path).map_err(|e| SceneError::Format(e.to_string()))?;
        f.write_all(self.to_json()?.as_bytes())
            .map_err(|e| SceneError::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let mut s = String::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_string(&mut s))
            .map_err(|e| SceneError::Format(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    fn check(&self) -> Result<(), SceneError> {
        let n = self.poses.len();
        if self.depths.len() != n || self.timestamps.len() != n {
            return Err(SceneError::Format("pose, depth and timestamp counts differ".into()));
        }
        for d in &self.depths {
            InverseDepthMap::new(d.width(), d.height(), d.values().to_vec())
                .map_err(|e| SceneError::Format(e.to_string()))?;
            if (d.width(), d.height()) != (self.width, self.height) {
                return Err(SceneError::Format("depth map size differs from scene size".into()));
            }
        }
        if let Some(s) = &self.stereo {
            if s.right_depths.len() != n {
                return Err(SceneError::Format("right depth count differs".into()));
            }
        }
        if self.timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SceneError::Format("timestamps must increase".into()));
        }
        Ok(())
    }
}

fn random_surface(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Surface {
    let count = 4;
    let amp = cfg.surface_relief / count as f64;
    let harmonics = (0..count)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            // Slopes stay well below the ray angles so each ray hits the surface once.
            let freq = rng.random_range(0.2..0.8);
            Harmonic {
                amplitude: amp * rng.random_range(0.5..1.0),
                freq_x: freq * angle.cos(),
                freq_y: freq * angle.sin(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();
    Surface {
        base: cfg.surface_depth,
        harmonics,
    }
}

fn camera_pose(center: &Vector3<f64>, tilt: &Vector3<f64>) -> PoseSE3 {
    let cam_to_world = PoseSE3::exp(&Twist::new(Vector3::zeros(), *tilt));
    let cam_to_world = PoseSE3::from_parts(*cam_to_world.rotation(), *center);
    cam_to_world.inverse()
}

/// Generates a smooth random trajectory whose consecutive mean flow lies in the configured band.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SyntheticScene, SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = cfg.intrinsics();
    let surface = random_surface(cfg, &mut rng);

    let mut centers = vec![Vector3::zeros()];
    let mut tilts = vec![Vector3::zeros()];
    let mut poses = vec![PoseSE3::identity()];
    let mut depths = vec![surface.render(&poses[0], &intr, cfg.width, cfg.height)?];

    let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let loop_radius_steps = cfg.frames as f64;

    for k in 1..cfg.frames {
        let prev_center = centers[k - 1];
        let prev_tilt = tilts[k - 1];
        let mut accepted = None;
        for _attempt in 0..64 {
            let dir = match cfg.motion {
                MotionPattern::Wander => {
                    heading += rng.random_range(-0.35..0.35);
                    let dz = rng.random_range(-0.15..0.15) - 0.5 * prev_center.z;
                    Vector3::new(heading.cos(), heading.sin(), dz).normalize()
                }
                MotionPattern::Loop => {
                    let a = std::f64::consts::TAU * (k as f64 - 0.5) / loop_radius_steps;
                    Vector3::new(-a.sin(), a.cos(), 0.0)
                }
            };
            let mut tilt = prev_tilt
                + Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ) * cfg.max_rotation_step
                    / 3f64.sqrt();
            // Mean reversion keeps the camera facing the surface.
            tilt *= if tilt.norm() > cfg.max_tilt { cfg.max_tilt / tilt.norm() } else { 0.9 };

            let flow_at = |step: f64| -> Result<(PoseSE3, f64), SceneError> {
                let g = camera_pose(&(prev_center + dir * step), &tilt);
                Ok((g, mean_flow_magnitude(&poses[k - 1], &g, &depths[k - 1], &intr)))
            };
            // Flow grows with the step length; bisect for the target, treating
            // non-covisible steps as too long.
            let (mut lo, mut hi) = (0.0, cfg.max_step);
            let mut found = None;
            for it in 0..80 {
                let step = if it == 0 { hi } else { 0.5 * (lo + hi) };
                let (g, flow) = flow_at(step)?;
                if flow.is_finite() && (flow - cfg.target_flow).abs() < 1e-3 * cfg.target_flow.max(1.0) {
                    found = Some((g, step, flow));
                    break;
                }
                if flow.is_finite() && flow < cfg.target_flow {
                    lo = step;
                } else {
                    hi = step;
                }
                if flow.is_finite() {
                    found = Some((g, step, flow));
                }
                if hi - lo < 1e-12 * cfg.max_step {
                    break;
                }
            }
            if let Some((g, step, flow)) = found {
                if flow.is_finite() && flow >= cfg.flow_min && flow <= cfg.flow_max {
                    accepted = Some((g, prev_center + dir * step, tilt));
                    break;
                }
            }
        }
        let (g, center, tilt) = accepted.ok_or_else(|| {
            SceneError::Unsatisfiable(format!(
                "could not place frame {k} with mean flow in [{}, {}]",
                cfg.flow_min, cfg.flow_max
            ))
        })?;
        depths.push(surface.render(&g, &intr, cfg.width, cfg.height)?);
        poses.push(g);
        centers.push(center);
        tilts.push(tilt);
    }

    let mut scene = SyntheticScene::from_poses(
        poses,
        surface,
        intr,
        cfg.width,
        cfg.height,
        cfg.frame_interval,
        cfg.stereo_baseline,
    )?;
    scene.seed = seed;
    debug_assert_eq!(scene.depths, depths);
    Ok(scene)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceFidelity {
    /// Inverse of the true per-pixel error variance.
    #[default]
    OracleTrue,
    /// Unit weight everywhere.
    Constant,
    /// Outliers receive the confidence inliers deserve, and vice versa.
    Adversarial,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    /// Gaussian noise on targets (pixels, per coordinate).
    pub sigma: f64,
    pub outlier_fraction: f64,
    /// Displacement applied to outlier targets (pixels).
    pub outlier_magnitude: f64,
    pub confidence: ConfidenceFidelity,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            outlier_fraction: 0.0,
            outlier_magnitude: 8.0,
            confidence: ConfidenceFidelity::OracleTrue,
        }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(SceneError::InvalidConfig(format!("sigma must be >= 0 (got {})", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(SceneError::InvalidConfig(format!(
                "outlier fraction must be in [0, 1] (got {})",
                self.outlier_fraction
            )));
        }
        if !(self.outlier_magnitude >= 0.0 && self.outlier_magnitude.is_finite()) {
            return Err(SceneError::InvalidConfig("outlier magnitude must be >= 0".into()));
        }
        Ok(())
    }

    fn confidences(&self) -> (f64, f64) {
        let inlier = 1.0 / (self.sigma * self.sigma + CONFIDENCE_EPS);
        let outlier =
            1.0 / (self.sigma * self.sigma + self.outlier_magnitude * self.outlier_magnitude + CONFIDENCE_EPS);
        match self.confidence {
            ConfidenceFidelity::OracleTrue => (inlier, outlier),
            ConfidenceFidelity::Constant => (1.0, 1.0),
            ConfidenceFidelity::Adversarial => (outlier, inlier),
        }
    }
}

/// Oracle output for one edge.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleRevision {
    pub observation: EdgeObservation,
    /// `r_ij = p*_ij − p_ij` relative to the current estimate; zero where invalid.
    pub revision: Vec<Vector2<f64>>,
    /// Pixels whose target was displaced as an outlier. Only available from the oracle.
    pub outliers: Vec<bool>,
}

/// SplitMix64 finalizer, used to derive independent per-edge seeds.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn view_code(v: ViewId) -> u64 {
    (v.frame as u64) << 1 | matches!(v.camera, Camera::Right) as u64
}

pub fn edge_seed(seed: u64, src: ViewId, dst: ViewId) -> u64 {
    mix_seed(mix_seed(seed ^ view_code(src).wrapping_mul(0xA24B_AED4_963E_E407)) ^ view_code(dst))
}

/// Targets for edge `src → dst` from ground truth plus the configured noise.
///
/// `local` gives the edge indices written into the observation; `current` is
/// the current (pose_src, pose_dst, depth_src) estimate used for the revision.
pub fn oracle_revision(
    scene: &SyntheticScene,
    src: ViewId,
    dst: ViewId,
    local: (usize, usize),
    current: Option<(&PoseSE3, &PoseSE3, &InverseDepthMap)>,
    noise: &NoiseModel,
    seed: u64,
) -> OracleRevision {
    let g_ij = scene.pose(dst).compose(&scene.pose(src).inverse());
    let gt = correspondence_from_relative(&g_ij, scene.depth(src), &scene.intrinsics);
    let n = gt.targets.len();
    let mut rng = ChaCha8Rng::seed_from_u64(edge_seed(seed, src, dst));
    let gauss = Normal::new(0.0, noise.sigma.max(0.0)).expect("sigma is finite");
    let (w_in, w_out) = noise.confidences();

    let mut targets = gt.targets.clone();
    let mut confidence = vec![Vector2::new(w_in, w_in); n];
    let mut outliers = vec![false; n];
    for k in 0..n {
        // Draw for every pixel so the noise pattern does not depend on validity.
        let nx = if noise.sigma > 0.0 { gauss.sample(&mut rng) } else { 0.0 };
        let ny = if noise.sigma > 0.0 { gauss.sample(&mut rng) } else { 0.0 };
        let is_outlier = noise.outlier_fraction > 0.0 && rng.random::<f64>() < noise.outlier_fraction;
        let angle = if is_outlier { rng.random_range(0.0..std::f64::consts::TAU) } else { 0.0 };
        if !gt.valid[k] {
            continue;
        }
        if noise.sigma > 0.0 {
            targets[k] += Vector2::new(nx, ny);
        }
        if is_outlier {
            targets[k] += Vector2::new(angle.cos(), angle.sin()) * noise.outlier_magnitude;
            confidence[k] = Vector2::new(w_out, w_out);
            outliers[k] = true;
        }
    }

    let revision = match current {
        Some((gi, gj, di)) => {
            let cur = dense_correspondence(gi, gj, di, &scene.intrinsics);
            targets
                .iter()
                .zip(&cur.targets)
                .zip(gt.valid.iter().zip(&cur.valid))
                .map(|((t, c), (a, b))| if *a && *b { t - c } else { Vector2::zeros() })
                .collect()
        }
        None => vec![Vector2::zeros(); n],
    };

    OracleRevision {
        observation: EdgeObservation {
            source: local.0,
            target: local.1,
            width: gt.width,
            height: gt.height,
            targets,
            confidence,
            valid: gt.valid,
        },
        revision,
        outliers,
    }
}

/// Ground-truth-backed stand-in for the learned update operator.
#[derive(Clone, Debug)]
pub struct SceneOracle {
    pub scene: SyntheticScene,
    pub noise: NoiseModel,
    pub seed: u64,
    /// Constant damping λ emitted for every pixel.
    pub damping: f64,
}

impl SceneOracle {
    pub fn new(scene: SyntheticScene, noise: NoiseModel, seed: u64) -> Self {
        Self {
            scene,
            noise,
            seed,
            damping: DEFAULT_DAMPING,
        }
    }

    pub fn observe(&self, src: ViewId, dst: ViewId, local: (usize, usize)) -> EdgeObservation {
        oracle_revision(&self.scene, src, dst, local, None, &self.noise, self.seed).observation
    }

    pub fn damping_map(&self) -> Vec<f64> {
        vec![self.damping; self.scene.width * self.scene.height]
    }
}

/// Source of revised correspondences for the SLAM system.
pub trait FlowOracle: Sync {
    fn image_size(&self) -> (usize, usize);
    fn intrinsics(&self) -> Intrinsics;
    /// Observation for edge `src → dst`, labelled with problem-local indices `local`.
    fn observe(&self, src: ViewId, dst: ViewId, local: (usize, usize)) -> EdgeObservation;
    /// Damping λ for every depth pixel.
    fn damping(&self) -> f64;
    /// Measured inverse depth for RGB-D input; missing pixels are ≤ 0.
    fn sensor_depth(&self, view: ViewId) -> Option<InverseDepthMap>;
    /// Left-to-right transform when stereo views exist.
    fn stereo_extrinsic(&self) -> Option<PoseSE3>;
}

impl FlowOracle for SceneOracle {
    fn image_size(&self) -> (usize, usize) {
        (self.scene.width, self.scene.height)
    }

    fn intrinsics(&self) -> Intrinsics {
        self.scene.intrinsics
    }

    fn observe(&self, src: ViewId, dst: ViewId, local: (usize, usize)) -> EdgeObservation {
        SceneOracle::observe(self, src, dst, local)
    }

    fn damping(&self) -> f64 {
        self.damping
    }

    fn sensor_depth(&self, view: ViewId) -> Option<InverseDepthMap> {
        Some(self.scene.depth(view).clone())
    }

    fn stereo_extrinsic(&self) -> Option<PoseSE3> {
        self.scene.stereo.as_ref().map(|s| stereo_extrinsic(s.baseline))
    }
}

/// Number of fine pixels per coarse pixel along each axis.
pub const UPSAMPLE: usize = 8;

/// Convex combination weights over the 3×3 coarse neighborhood, one set per fine pixel.
///
/// Layout: `weights[(coarse_index * 64) + sub_row * 8 + sub_col]`, neighbors in
/// row-major order with index 4 the center.
#[derive(Clone, Debug, PartialEq)]
pub struct UpsampleMask {
    pub width: usize,
    pub height: usize,
    pub weights: Vec<[f64; 9]>,
}

impl UpsampleMask {
    pub fn new(width: usize, height: usize, weights: Vec<[f64; 9]>) -> Self {
        assert_eq!(weights.len(), width * height * UPSAMPLE * UPSAMPLE, "mask size mismatch");
        Self { width, height, weights }
    }

    /// All weight on the center pixel: nearest-neighbor replication.
    pub fn nearest(width: usize, height: usize) -> Self {
        let mut w = [0.0; 9];
        w[4] = 1.0;
        Self::new(width, height, vec![w; width * height * UPSAMPLE * UPSAMPLE])
    }

    pub fn uniform(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![[1.0 / 9.0; 9]; width * height * UPSAMPLE * UPSAMPLE])
    }

    /// Weights reproducing bilinear interpolation between coarse pixel centers.
    pub fn bilinear(width: usize, height: usize) -> Self {
        let axis = |s: usize| -> [f64; 3] {
            let off = (s as f64 + 0.5) / UPSAMPLE as f64 - 0.5;
            if off >= 0.0 {
                [0.0, 1.0 - off, off]
            } else {
                [-off, 1.0 + off, 0.0]
            }
        };
        let mut sub = Vec::with_capacity(UPSAMPLE * UPSAMPLE);
        for sy in 0..UPSAMPLE {
            for sx in 0..UPSAMPLE {
                let (wy, wx) = (axis(sy), axis(sx));
                let mut w = [0.0; 9];
                for dy in 0..3 {
                    for dx in 0..3 {
                        w[dy * 3 + dx] = wy[dy] * wx[dx];
                    }
                }
                sub.push(w);
            }
        }
        let mut weights = Vec::with_capacity(width * height * UPSAMPLE * UPSAMPLE);
        for _ in 0..width * height {
            weights.extend_from_slice(&sub);
        }
        Self::new(width, height, weights)
    }
}

fn renormalize(w: &[f64; 9]) -> [f64; 9] {
    let mut out = w.map(|x| if x.is_finite() && x > 0.0 { x } else { 0.0 });
    let sum: f64 = out.iter().sum();
    if sum > 0.0 {
        for x in &mut out {
            *x /= sum;
        }
        out
    } else {
        [1.0 / 9.0; 9]
    }
}

/// Upsamples a coarse map 8× per axis; each fine value is a convex combination of its 3×3
/// coarse neighborhood (borders replicated). Weights are renormalized before use.
pub fn convex_upsample(coarse: &InverseDepthMap, mask: &UpsampleMask) -> InverseDepthMap {
    let (w, h) = (coarse.width(), coarse.height());
    assert_eq!((mask.width, mask.height), (w, h), "mask and map sizes differ");
    let (fw, fh) = (w * UPSAMPLE, h * UPSAMPLE);
    let mut fine = vec![0.0; fw * fh];
    for r in 0..h {
        for c in 0..w {
            let mut nb = [0.0; 9];
            for dy in 0..3 {
                for dx in 0..3 {
                    let rr = (r as isize + dy as isize - 1).clamp(0, h as isize - 1) as usize;
                    let cc = (c as isize + dx as isize - 1).clamp(0, w as isize - 1) as usize;
                    nb[dy * 3 + dx] = coarse.get(rr, cc);
                }
            }
            let base = (r * w + c) * UPSAMPLE * UPSAMPLE;
            for sy in 0..UPSAMPLE {
                for sx in 0..UPSAMPLE {
                    let wts = renormalize(&mask.weights[base + sy * UPSAMPLE + sx]);
                    let v: f64 = wts.iter().zip(&nb).map(|(a, b)| a * b).sum();
                    fine[(r * UPSAMPLE + sy) * fw + c * UPSAMPLE + sx] = v;
                }
            }
        }
    }
    InverseDepthMap::new(fw, fh, fine).expect("convex combination of positive values is positive")
}
