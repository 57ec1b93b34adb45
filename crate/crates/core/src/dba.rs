//! Dense bundle adjustment over poses and per-pixel inverse depth.
//!
//! The objective is the confidence-weighted reprojection error
//!
//! ```text
//! E(G, d) = Σ_(i,j) Σ_k ‖p*_ijk − Π(G_j G_i⁻¹ Π⁻¹(p_k, d_ik))‖²_diag(w_ijk)
//! ```
//!
//! Every residual touches exactly one depth value (pixel `k` of the source
//! frame), so after Gauss-Newton linearization the depth block `C` is
//! diagonal. [`schur_solve`] eliminates it and factors the reduced pose
//! system `B − E C⁻¹ Eᵀ` with a Cholesky decomposition.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Cholesky, DMatrix, DVector, Matrix6, Matrix6xX, Vector2, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{pixel_jacobians, InverseDepthMap, Intrinsics};
use crate::correspondence::PixelGrid;
use crate::error::SolverError;
use crate::se3::{PoseSE3, Twist};

/// Damping added to the depth block when no oracle supplies one.
pub const DEFAULT_DAMPING: f64 = 1e-4;
/// Floor added to every diagonal entry of `C`.
pub const C_FLOOR: f64 = 1e-8;
/// Inverse depths are clamped into this range after each update.
pub const DEFAULT_DEPTH_RANGE: (f64, f64) = (1e-4, 10.0);

/// Revised correspondence targets and confidences for one directed edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeObservation {
    pub source: usize,
    pub target: usize,
    pub width: usize,
    pub height: usize,
    /// `p*_ij` per source pixel, row-major.
    pub targets: Vec<Vector2<f64>>,
    /// Per-pixel, per-coordinate inverse variance.
    pub confidence: Vec<Vector2<f64>>,
    pub valid: Vec<bool>,
}

impl EdgeObservation {
    pub fn edge(&self) -> (usize, usize) {
        (self.source, self.target)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Multiplies all confidences by `s`.
    pub fn scale_confidence(&mut self, s: f64) {
        for w in &mut self.confidence {
            *w *= s;
        }
    }

    /// Fraction of pixels whose target is valid and falls inside the image.
    pub fn overlap(&self) -> f64 {
        let n = self
            .targets
            .iter()
            .zip(&self.valid)
            .filter(|(t, ok)| **ok && Intrinsics::in_bounds(t, self.width, self.height))
            .count();
        n as f64 / self.targets.len().max(1) as f64
    }
}

/// Sensor inverse depth for one frame. Non-positive or non-finite entries are missing observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthPrior {
    pub sensor: Vec<f64>,
    pub weight: f64,
}

impl DepthPrior {
    #[inline]
    fn observed(&self, k: usize) -> Option<f64> {
        let s = self.sensor[k];
        (s > 0.0 && s.is_finite()).then_some(s)
    }
}

/// Stereo pairs whose relative pose is held at `extrinsic`: `G_right = extrinsic ∘ G_left`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigBinding {
    pub pairs: Vec<(usize, usize)>,
    pub extrinsic: PoseSE3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BAProblem {
    pub poses: Vec<PoseSE3>,
    pub depths: Vec<InverseDepthMap>,
    pub intrinsics: Intrinsics,
    pub observations: Vec<EdgeObservation>,
    pub fixed_poses: BTreeSet<usize>,
    /// Per-frame, per-pixel damping λ added to the depth block.
    pub damping: Vec<Vec<f64>>,
    pub depth_priors: Vec<Option<DepthPrior>>,
    pub rig: Option<RigBinding>,
    pub depth_range: (f64, f64),
}

/// How a frame's pose depends on the optimization variables.
#[derive(Clone, Copy, Debug, PartialEq)]
enum PoseSlot {
    Fixed,
    Free(usize),
    /// Right camera of a rig: perturbation of variable `var` reaches it through `Adj(extrinsic)`.
    Rig(usize),
}

#[derive(Clone, Debug)]
struct PoseLayout {
    slots: Vec<PoseSlot>,
    /// Frame that owns each variable.
    var_frames: Vec<usize>,
    rig_adjoint: Matrix6<f64>,
}

impl PoseLayout {
    fn num_vars(&self) -> usize {
        self.var_frames.len()
    }

    /// Variable of frame `f` and the map from that variable's perturbation to the frame's own.
    #[inline]
    fn chain_map(&self, f: usize) -> Option<(usize, Matrix6<f64>)> {
        match self.slots[f] {
            PoseSlot::Fixed => None,
            PoseSlot::Free(v) => Some((v, Matrix6::identity())),
            PoseSlot::Rig(v) => Some((v, self.rig_adjoint)),
        }
    }
}

/// Gauss-Newton normal equations split into pose and depth blocks.
#[derive(Clone, Debug)]
pub struct LinearSystemBlocks {
    /// Frame owning each pose variable, in variable order.
    pub pose_var_frames: Vec<usize>,
    /// 6m × 6m pose-pose block.
    pub b: DMatrix<f64>,
    /// Pose-depth coupling, keyed by (pose variable, depth frame); one column per pixel.
    pub e: BTreeMap<(usize, usize), Matrix6xX<f64>>,
    /// Diagonal of the depth block, per frame and pixel.
    pub c: Vec<Vec<f64>>,
    /// Pose right-hand side.
    pub v: DVector<f64>,
    /// Depth right-hand side, per frame and pixel.
    pub rhs_d: Vec<Vec<f64>>,
}

impl LinearSystemBlocks {
    pub fn num_pose_vars(&self) -> usize {
        self.pose_var_frames.len()
    }

    pub fn num_depths(&self) -> usize {
        self.c.iter().map(Vec::len).sum()
    }

    fn depth_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.c.len());
        let mut acc = 0;
        for c in &self.c {
            offsets.push(acc);
            acc += c.len();
        }
        offsets
    }

    /// E as a dense 6m × (Σ pixels) matrix, depth columns ordered frame by frame.
    pub fn dense_e(&self) -> DMatrix<f64> {
        let offsets = self.depth_offsets();
        let mut e = DMatrix::zeros(6 * self.num_pose_vars(), self.num_depths());
        for (&(var, frame), block) in &self.e {
            e.view_mut((6 * var, offsets[frame]), (6, block.ncols()))
                .copy_from(block);
        }
        e
    }

    /// The full symmetric system `[B E; Eᵀ diag(C)]` and its right-hand side `[v; rhs_d]`.
    pub fn dense_system(&self) -> (DMatrix<f64>, DVector<f64>) {
        let np = 6 * self.num_pose_vars();
        let nd = self.num_depths();
        let mut h = DMatrix::zeros(np + nd, np + nd);
        let e = self.dense_e();
        h.view_mut((0, 0), (np, np)).copy_from(&self.b);
        h.view_mut((0, np), (np, nd)).copy_from(&e);
        h.view_mut((np, 0), (nd, np)).copy_from(&e.transpose());
        let c: Vec<f64> = self.c.iter().flatten().copied().collect();
        for (k, ck) in c.iter().enumerate() {
            h[(np + k, np + k)] = *ck;
        }
        let mut g = DVector::zeros(np + nd);
        g.rows_mut(0, np).copy_from(&self.v);
        for (k, r) in self.rhs_d.iter().flatten().enumerate() {
            g[np + k] = *r;
        }
        (h, g)
    }

    /// Reduced pose system `S = B − E C⁻¹ Eᵀ` and its right-hand side `v − E C⁻¹ rhs_d`.
    pub fn reduced_pose_system(&self) -> (DMatrix<f64>, DVector<f64>) {
        let mut s = self.b.clone();
        let mut g = self.v.clone();
        let mut by_frame: BTreeMap<usize, Vec<(usize, &Matrix6xX<f64>)>> = BTreeMap::new();
        for (&(var, frame), block) in &self.e {
            by_frame.entry(frame).or_default().push((var, block));
        }
        for (frame, blocks) in by_frame {
            let cinv: Vec<f64> = self.c[frame].iter().map(|c| 1.0 / c).collect();
            let scaled_rhs: DVector<f64> = DVector::from_iterator(
                cinv.len(),
                self.rhs_d[frame].iter().zip(&cinv).map(|(r, ci)| r * ci),
            );
            for (ai, &(a, ea)) in blocks.iter().enumerate() {
                let mut ea_scaled = ea.clone();
                for (col, ci) in ea_scaled.column_iter_mut().zip(&cinv) {
                    let mut col = col;
                    col *= *ci;
                }
                let ga = ea * &scaled_rhs;
                let mut gv = g.fixed_rows_mut::<6>(6 * a);
                gv -= ga;
                for &(b, eb) in &blocks[ai..] {
                    let blk: Matrix6<f64> = &ea_scaled * eb.transpose();
                    let mut sab = s.fixed_view_mut::<6, 6>(6 * a, 6 * b);
                    sab -= blk;
                    if a != b {
                        let mut sba = s.fixed_view_mut::<6, 6>(6 * b, 6 * a);
                        sba -= blk.transpose();
                    }
                }
            }
        }
        (s, g)
    }
}

/// Pose and depth increments from one Gauss-Newton step.
#[derive(Clone, Debug, PartialEq)]
pub struct Updates {
    /// One twist per pose variable.
    pub pose: Vec<Twist>,
    /// Frame owning each pose variable.
    pub pose_var_frames: Vec<usize>,
    /// One increment per pixel and frame; empty vectors leave depths untouched.
    pub depth: Vec<Vec<f64>>,
}

impl Updates {
    pub fn max_pose_norm(&self) -> f64 {
        self.pose.iter().map(Twist::norm).fold(0.0, f64::max)
    }

    pub fn max_depth_abs(&self) -> f64 {
        self.depth.iter().flatten().map(|x| x.abs()).fold(0.0, f64::max)
    }
}

/// Per-edge residuals (`None` where masked) and the total weighted cost.
#[derive(Clone, Debug)]
pub struct Residuals {
    pub per_edge: Vec<Vec<Option<Vector2<f64>>>>,
    pub cost: f64,
}

impl BAProblem {
    /// A problem with default damping, no priors and no rig.
    pub fn new(
        poses: Vec<PoseSE3>,
        depths: Vec<InverseDepthMap>,
        intrinsics: Intrinsics,
        observations: Vec<EdgeObservation>,
        fixed_poses: BTreeSet<usize>,
    ) -> Result<Self, SolverError> {
        let damping = depths
            .iter()
            .map(|d| vec![DEFAULT_DAMPING; d.len()])
            .collect();
        let depth_priors = vec![None; depths.len()];
        let problem = Self {
            poses,
            depths,
            intrinsics,
            observations,
            fixed_poses,
            damping,
            depth_priors,
            rig: None,
            depth_range: DEFAULT_DEPTH_RANGE,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn num_frames(&self) -> usize {
        self.poses.len()
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let n = self.poses.len();
        for obs in &self.observations {
            let (i, j) = obs.edge();
            if i >= n || j >= n || i >= self.depths.len() {
                return Err(SolverError::UnknownFrame(i, j));
            }
            if i == j {
                return Err(SolverError::SelfEdge(i));
            }
            let d = &self.depths[i];
            let expected = (d.width(), d.height());
            if (obs.width, obs.height) != expected
                || obs.targets.len() != d.len()
                || obs.confidence.len() != d.len()
                || obs.valid.len() != d.len()
            {
                return Err(SolverError::ShapeMismatch {
                    i,
                    j,
                    got: (obs.width, obs.height),
                    expected,
                });
            }
        }
        Ok(())
    }

    /// Sets the same damping value on every pixel of every frame.
    pub fn set_uniform_damping(&mut self, lambda: f64) {
        for (d, lam) in self.depths.iter().zip(self.damping.iter_mut()) {
            *lam = vec![lambda; d.len()];
        }
    }

    fn layout(&self) -> PoseLayout {
        let n = self.poses.len();
        let mut slots = vec![PoseSlot::Fixed; n];
        let mut rig_right: BTreeMap<usize, usize> = BTreeMap::new();
        let mut rig_left: BTreeSet<usize> = BTreeSet::new();
        let mut rig_adjoint = Matrix6::identity();
        if let Some(rig) = &self.rig {
            rig_adjoint = rig.extrinsic.adjoint();
            for &(l, r) in &rig.pairs {
                rig_right.insert(r, l);
                rig_left.insert(l);
            }
        }
        let pair_fixed = |l: usize| -> bool {
            let r = rig_right.iter().find(|(_, &ll)| ll == l).map(|(r, _)| *r);
            self.fixed_poses.contains(&l) || r.is_some_and(|r| self.fixed_poses.contains(&r))
        };
        let mut var_frames = Vec::new();
        for f in 0..n {
            if rig_right.contains_key(&f) {
                continue;
            }
            let fixed = if rig_left.contains(&f) {
                pair_fixed(f)
            } else {
                self.fixed_poses.contains(&f)
            };
            if !fixed {
                slots[f] = PoseSlot::Free(var_frames.len());
                var_frames.push(f);
            }
        }
        for (&r, &l) in &rig_right {
            if let PoseSlot::Free(v) = slots[l] {
                slots[r] = PoseSlot::Rig(v);
            }
        }
        PoseLayout {
            slots,
            var_frames,
            rig_adjoint,
        }
    }

    /// Residuals `p* − Π(G_ij Π⁻¹(p, d))` and the weighted cost including depth priors.
    pub fn build_residuals(&self) -> Residuals {
        let per_edge: Vec<(Vec<Option<Vector2<f64>>>, f64)> = self
            .observations
            .par_iter()
            .map(|obs| edge_residuals(self, obs))
            .collect();
        let mut cost = 0.0;
        let mut out = Vec::with_capacity(per_edge.len());
        for (r, c) in per_edge {
            cost += c;
            out.push(r);
        }
        cost += self.prior_cost();
        Residuals {
            per_edge: out,
            cost,
        }
    }

    pub fn cost(&self) -> f64 {
        self.build_residuals().cost
    }

    fn prior_cost(&self) -> f64 {
        let mut cost = 0.0;
        for (f, prior) in self.depth_priors.iter().enumerate() {
            let Some(prior) = prior else { continue };
            if prior.weight == 0.0 {
                continue;
            }
            for (k, d) in self.depths[f].values().iter().enumerate() {
                if let Some(s) = prior.observed(k) {
                    cost += prior.weight * (d - s) * (d - s);
                }
            }
        }
        cost
    }

    /// Gauss-Newton normal equations with the configured damping on the depth block.
    pub fn linearize(&self) -> LinearSystemBlocks {
        self.linearize_inner(true)
    }

    /// As [`BAProblem::linearize`] but without λ; only the floor [`C_FLOOR`] is added to `C`.
    pub fn linearize_undamped(&self) -> LinearSystemBlocks {
        self.linearize_inner(false)
    }

    fn linearize_inner(&self, damped: bool) -> LinearSystemBlocks {
        let layout = self.layout();
        let m = layout.num_vars();
        let contributions: Vec<EdgeContribution> = self
            .observations
            .par_iter()
            .map(|obs| linearize_edge(self, &layout, obs))
            .collect();

        let mut b = DMatrix::zeros(6 * m, 6 * m);
        let mut v = DVector::zeros(6 * m);
        let mut e: BTreeMap<(usize, usize), Matrix6xX<f64>> = BTreeMap::new();
        let mut c: Vec<Vec<f64>> = self.depths.iter().map(|d| vec![0.0; d.len()]).collect();
        let mut rhs_d: Vec<Vec<f64>> = self.depths.iter().map(|d| vec![0.0; d.len()]).collect();

        for contrib in contributions {
            for ((a, bb), blk) in contrib.b_blocks {
                let mut view = b.fixed_view_mut::<6, 6>(6 * a, 6 * bb);
                view += blk;
            }
            for (a, g) in contrib.v_blocks {
                let mut view = v.fixed_rows_mut::<6>(6 * a);
                view += g;
            }
            let frame = contrib.frame;
            for (a, blk) in contrib.e_blocks {
                match e.get_mut(&(a, frame)) {
                    Some(acc) => *acc += blk,
                    None => {
                        e.insert((a, frame), blk);
                    }
                }
            }
            for (acc, x) in c[frame].iter_mut().zip(&contrib.c) {
                *acc += x;
            }
            for (acc, x) in rhs_d[frame].iter_mut().zip(&contrib.rhs_d) {
                *acc += x;
            }
        }

        for (f, prior) in self.depth_priors.iter().enumerate() {
            let Some(prior) = prior else { continue };
            if prior.weight == 0.0 {
                continue;
            }
            let d = self.depths[f].values();
            for k in 0..d.len() {
                if let Some(s) = prior.observed(k) {
                    c[f][k] += prior.weight;
                    rhs_d[f][k] += prior.weight * (s - d[k]);
                }
            }
        }

        for (f, cf) in c.iter_mut().enumerate() {
            for (k, ck) in cf.iter_mut().enumerate() {
                if damped {
                    *ck += self.damping[f][k];
                }
                *ck += C_FLOOR;
            }
        }

        // Mirror the upper triangle so B is exactly symmetric.
        for a in 0..m {
            for bb in (a + 1)..m {
                let upper = b.fixed_view::<6, 6>(6 * a, 6 * bb).into_owned();
                b.fixed_view_mut::<6, 6>(6 * bb, 6 * a)
                    .copy_from(&upper.transpose());
            }
        }

        LinearSystemBlocks {
            pose_var_frames: layout.var_frames,
            b,
            e,
            c,
            v,
            rhs_d,
        }
    }

    /// Retracts free poses, re-derives rig-bound poses and adds clamped depth increments.
    pub fn apply_updates(&mut self, updates: &Updates) -> Result<(), SolverError> {
        let layout = self.layout();
        if updates.pose.len() != layout.num_vars() {
            return Err(SolverError::UpdateSize {
                got: updates.pose.len(),
                expected: layout.num_vars(),
            });
        }
        for (var, &frame) in layout.var_frames.iter().enumerate() {
            self.poses[frame] = self.poses[frame].retract(&updates.pose[var]);
        }
        if let Some(rig) = &self.rig {
            for &(l, r) in &rig.pairs {
                if matches!(layout.slots[r], PoseSlot::Rig(_)) {
                    self.poses[r] = rig.extrinsic.compose(&self.poses[l]);
                }
            }
        }
        if !updates.depth.is_empty() {
            if updates.depth.len() != self.depths.len() {
                return Err(SolverError::UpdateSize {
                    got: updates.depth.len(),
                    expected: self.depths.len(),
                });
            }
            let (lo, hi) = self.depth_range;
            for (d, delta) in self.depths.iter_mut().zip(&updates.depth) {
                if delta.is_empty() {
                    continue;
                }
                if delta.len() != d.len() {
                    return Err(SolverError::UpdateSize {
                        got: delta.len(),
                        expected: d.len(),
                    });
                }
                d.add_clamped(delta, lo, hi);
            }
        }
        Ok(())
    }

    /// One damped Gauss-Newton step. A failed factorization is retried once with λ × 10.
    pub fn step(&mut self) -> Result<Updates, SolverError> {
        let updates = match schur_solve(&self.linearize()) {
            Ok(u) => u,
            Err(SolverError::IllConditioned { .. }) => {
                let saved = self.damping.clone();
                for lam in self.damping.iter_mut().flatten() {
                    *lam *= 10.0;
                }
                let retry = schur_solve(&self.linearize());
                self.damping = saved;
                retry?
            }
            Err(e) => return Err(e),
        };
        self.apply_updates(&updates)?;
        Ok(updates)
    }

    /// Runs `n_iters` Gauss-Newton steps; returns the cost before the first step and after each one.
    pub fn dba_iterate(&mut self, n_iters: usize) -> Result<Vec<f64>, SolverError> {
        if n_iters == 0 {
            return Err(SolverError::NoIterations);
        }
        self.validate()?;
        let mut trace = Vec::with_capacity(n_iters + 1);
        trace.push(self.cost());
        for _ in 0..n_iters {
            self.step()?;
            trace.push(self.cost());
        }
        Ok(trace)
    }

    /// Pose-only Gauss-Newton with depths held constant; solves `B Δξ = v`.
    pub fn motion_only_ba(&mut self, n_iters: usize) -> Result<Vec<f64>, SolverError> {
        if n_iters == 0 {
            return Err(SolverError::NoIterations);
        }
        self.validate()?;
        let mut trace = Vec::with_capacity(n_iters + 1);
        trace.push(self.cost());
        for _ in 0..n_iters {
            let blocks = self.linearize();
            let dxi = solve_spd(blocks.b.clone(), &blocks.v)?;
            let updates = Updates {
                pose: split_twists(&dxi),
                pose_var_frames: blocks.pose_var_frames,
                depth: Vec::new(),
            };
            self.apply_updates(&updates)?;
            trace.push(self.cost());
        }
        Ok(trace)
    }

    /// Adds `weight · (d − d_sensor)²` for every observed pixel of `frame`.
    pub fn add_depth_prior(&mut self, frame: usize, sensor: &InverseDepthMap, weight: f64) -> Result<(), SolverError> {
        self.add_depth_prior_raw(frame, sensor.values().to_vec(), weight)
    }

    /// Like [`BAProblem::add_depth_prior`] but accepts missing observations (≤ 0 or non-finite).
    pub fn add_depth_prior_raw(&mut self, frame: usize, sensor: Vec<f64>, weight: f64) -> Result<(), SolverError> {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(SolverError::InvalidWeight(weight));
        }
        if frame >= self.depths.len() {
            return Err(SolverError::UnknownFrame(frame, frame));
        }
        if sensor.len() != self.depths[frame].len() {
            return Err(SolverError::UpdateSize {
                got: sensor.len(),
                expected: self.depths[frame].len(),
            });
        }
        self.depth_priors[frame] = Some(DepthPrior { sensor, weight });
        Ok(())
    }

    /// Binds stereo pairs to a shared pose variable with `G_right = extrinsic ∘ G_left`.
    pub fn bind_rig(&mut self, pairs: Vec<(usize, usize)>, extrinsic: PoseSE3) -> Result<(), SolverError> {
        let mut seen = BTreeSet::new();
        for &(l, r) in &pairs {
            if l >= self.poses.len() || r >= self.poses.len() {
                return Err(SolverError::UnknownFrame(l, r));
            }
            if l == r {
                return Err(SolverError::SelfEdge(l));
            }
            for f in [l, r] {
                if !seen.insert(f) {
                    return Err(SolverError::OverlappingRig(f));
                }
            }
        }
        for &(l, r) in &pairs {
            self.poses[r] = extrinsic.compose(&self.poses[l]);
        }
        self.rig = Some(RigBinding { pairs, extrinsic });
        Ok(())
    }
}

/// Solves the block system by eliminating depth with the Schur complement.
pub fn schur_solve(blocks: &LinearSystemBlocks) -> Result<Updates, SolverError> {
    let (s, g) = blocks.reduced_pose_system();
    let dxi = solve_spd(s, &g)?;

    let mut depth: Vec<Vec<f64>> = blocks.rhs_d.clone();
    for (&(var, frame), e) in &blocks.e {
        let xi = dxi.fixed_rows::<6>(6 * var);
        let etx = e.transpose() * xi;
        for (acc, x) in depth[frame].iter_mut().zip(etx.iter()) {
            *acc -= x;
        }
    }
    for (df, cf) in depth.iter_mut().zip(&blocks.c) {
        for (d, c) in df.iter_mut().zip(cf) {
            *d /= c;
        }
    }
    Ok(Updates {
        pose: split_twists(&dxi),
        pose_var_frames: blocks.pose_var_frames.clone(),
        depth,
    })
}

fn split_twists(x: &DVector<f64>) -> Vec<Twist> {
    (0..x.len() / 6)
        .map(|k| Twist(Vector6::from_iterator(x.rows(6 * k, 6).iter().copied())))
        .collect()
}

fn solve_spd(mut s: DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>, SolverError> {
    if s.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    let st = s.transpose();
    s += st;
    s *= 0.5;
    let diag = s.clone();
    match Cholesky::new(s) {
        Some(chol) => {
            let x = chol.solve(g);
            if x.iter().all(|v| v.is_finite()) {
                Ok(x)
            } else {
                Err(ill_conditioned(diag))
            }
        }
        None => Err(ill_conditioned(diag)),
    }
}

fn ill_conditioned(s: DMatrix<f64>) -> SolverError {
    let dim = s.nrows();
    let eig = s.symmetric_eigenvalues();
    SolverError::IllConditioned {
        dim,
        min_eigenvalue: eig.min(),
        max_eigenvalue: eig.max(),
    }
}

struct EdgeContribution {
    frame: usize,
    b_blocks: Vec<((usize, usize), Matrix6<f64>)>,
    v_blocks: Vec<(usize, Vector6<f64>)>,
    e_blocks: Vec<(usize, Matrix6xX<f64>)>,
    c: Vec<f64>,
    rhs_d: Vec<f64>,
}

fn edge_residuals(problem: &BAProblem, obs: &EdgeObservation) -> (Vec<Option<Vector2<f64>>>, f64) {
    let (i, j) = obs.edge();
    let g_ij = problem.poses[j].compose(&problem.poses[i].inverse());
    let d = problem.depths[i].values();
    let grid = PixelGrid::new(obs.width, obs.height);
    let intr = &problem.intrinsics;
    let mut cost = 0.0;
    let res = (0..d.len())
        .map(|k| {
            if !obs.valid[k] {
                return None;
            }
            let x = intr.backproject_unchecked(&grid.point(k), d[k]);
            let p = intr.project(&g_ij.act(&x))?;
            let r = obs.targets[k] - p;
            let w = obs.confidence[k];
            cost += w.x * r.x * r.x + w.y * r.y * r.y;
            Some(r)
        })
        .collect();
    (res, cost)
}

fn linearize_edge(problem: &BAProblem, layout: &PoseLayout, obs: &EdgeObservation) -> EdgeContribution {
    let (i, j) = obs.edge();
    let g_ij = problem.poses[j].compose(&problem.poses[i].inverse());
    let adj = g_ij.adjoint();
    let t_ij = *g_ij.translation();
    let d = problem.depths[i].values();
    let n = d.len();
    let grid = PixelGrid::new(obs.width, obs.height);
    let intr = &problem.intrinsics;

    // Every pose Jacobian of this edge is the target-side Jacobian times a
    // constant 6×6 map, so accumulate in target space and map once per edge.
    let mut vars: Vec<(usize, Matrix6<f64>)> = Vec::with_capacity(2);
    let source_map = layout.chain_map(i).map(|(v, m)| (v, -(adj * m)));
    for (v, m) in [source_map, layout.chain_map(j)].into_iter().flatten() {
        // Both endpoints may resolve to the same variable (edges inside a rig pair).
        match vars.iter_mut().find(|e| e.0 == v) {
            Some(e) => e.1 += m,
            None => vars.push((v, m)),
        }
    }
    let with_pose = !vars.is_empty();

    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    let mut et = Matrix6xX::zeros(if with_pose { n } else { 0 });
    let mut c = vec![0.0; n];
    let mut rhs = vec![0.0; n];

    for k in 0..n {
        if !obs.valid[k] {
            continue;
        }
        let x = intr.backproject_unchecked(&grid.point(k), d[k]);
        let xt = g_ij.act(&x);
        let Some(p) = intr.project(&xt) else { continue };
        let Some(jac) = pixel_jacobians(&xt, &t_ij, intr) else {
            continue;
        };
        let r = obs.targets[k] - p;
        let w = obs.confidence[k];
        let wr = Vector2::new(w.x * r.x, w.y * r.y);

        let jd = jac.depth;
        c[k] = w.x * jd.x * jd.x + w.y * jd.y * jd.y;
        rhs[k] = jd.dot(&wr);

        if with_pose {
            let jt = jac.target;
            let mut wjt = jt;
            wjt.row_mut(0).scale_mut(w.x);
            wjt.row_mut(1).scale_mut(w.y);
            h += wjt.transpose() * jt;
            g += jt.transpose() * wr;
            let wd = Vector2::new(w.x * jd.x, w.y * jd.y);
            et.set_column(k, &(jt.transpose() * wd));
        }
    }

    let mut b_blocks = Vec::new();
    let mut v_blocks = Vec::new();
    let mut e_blocks = Vec::new();
    for (ai, &(a, ma)) in vars.iter().enumerate() {
        let mat = ma.transpose();
        v_blocks.push((a, mat * g));
        e_blocks.push((a, mat * &et));
        let hm = mat * h;
        for &(b, mb) in &vars[ai..] {
            let blk = hm * mb;
            // Keep only the upper triangle; the lower one is mirrored after accumulation.
            if a <= b {
                b_blocks.push(((a, b), blk));
            } else {
                b_blocks.push(((b, a), blk.transpose()));
            }
        }
    }
    EdgeContribution {
        frame: i,
        b_blocks,
        v_blocks,
        e_blocks,
        c,
        rhs_d: rhs,
    }
}
