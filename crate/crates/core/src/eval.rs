//! Trajectories, TUM file I/O and error metrics.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::se3::PoseSE3;

/// Largest timestamp difference for two poses to be associated (seconds).
pub const ASSOCIATION_WINDOW: f64 = 0.02;
pub const MIN_ASSOCIATIONS: usize = 3;

/// Timestamped camera-to-world poses with strictly increasing timestamps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    stamps: Vec<f64>,
    poses: Vec<PoseSE3>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    Se3,
    Sim3,
}

/// Similarity taking estimated positions onto ground truth: `y ≈ s·R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentResult {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub rmse: f64,
    pub associations: usize,
}

impl Trajectory {
    pub fn new(stamps: Vec<f64>, poses: Vec<PoseSE3>) -> Result<Self, EvalError> {
        if stamps.len() != poses.len() {
            return Err(EvalError::LengthMismatch(stamps.len(), poses.len()));
        }
        for (k, w) in stamps.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(EvalError::NonMonotone {
                    line: k + 2,
                    prev: w[0],
                    next: w[1],
                });
            }
        }
        Ok(Self { stamps, poses })
    }

    /// Builds a camera-to-world trajectory from world-to-camera poses.
    pub fn from_world_to_camera(stamps: Vec<f64>, poses: &[PoseSE3]) -> Result<Self, EvalError> {
        Self::new(stamps, poses.iter().map(PoseSE3::inverse).collect())
    }

    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }

    pub fn stamps(&self) -> &[f64] {
        &self.stamps
    }

    pub fn poses(&self) -> &[PoseSE3] {
        &self.poses
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &PoseSE3)> {
        self.stamps.iter().copied().zip(&self.poses)
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|g| *g.translation()).collect()
    }

    /// Applies `g ↦ a ∘ g` to every pose.
    pub fn left_transformed(&self, a: &PoseSE3) -> Self {
        Self {
            stamps: self.stamps.clone(),
            poses: self.poses.iter().map(|g| a.compose(g)).collect(),
        }
    }

    /// Multiplies every translation by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            stamps: self.stamps.clone(),
            poses: self
                .poses
                .iter()
                .map(|g| PoseSE3::from_parts(*g.rotation(), g.translation() * s))
                .collect(),
        }
    }

    pub fn to_tum_string(&self) -> String {
        let mut out = String::new();
        for (t, g) in self.iter() {
            let p = g.translation();
            let q = g.quaternion_xyzw();
            writeln!(out, "{} {} {} {} {} {} {} {}", t, p.x, p.y, p.z, q[0], q[1], q[2], q[3]).unwrap();
        }
        out
    }

    pub fn from_tum_str(text: &str) -> Result<Self, EvalError> {
        let mut stamps: Vec<f64> = Vec::new();
        let mut poses = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<f64> = line
                .split_whitespace()
                .map(|f| {
                    f.parse::<f64>().map_err(|e| EvalError::Parse {
                        line: line_no,
                        message: format!("bad number {f:?}: {e}"),
                    })
                })
                .collect::<Result<_, _>>()?;
            if fields.len() != 8 {
                return Err(EvalError::Parse {
                    line: line_no,
                    message: format!("expected 8 fields, found {}", fields.len()),
                });
            }
            if fields.iter().any(|v| !v.is_finite()) {
                return Err(EvalError::Parse {
                    line: line_no,
                    message: "non-finite value".into(),
                });
            }
            let qn = fields[4..8].iter().map(|v| v * v).sum::<f64>().sqrt();
            if qn < 1e-12 {
                return Err(EvalError::Parse {
                    line: line_no,
                    message: "zero quaternion".into(),
                });
            }
            if let Some(&prev) = stamps.last() {
                if !(fields[0] > prev) {
                    return Err(EvalError::NonMonotone {
                        line: line_no,
                        prev,
                        next: fields[0],
                    });
                }
            }
            stamps.push(fields[0]);
            poses.push(PoseSE3::from_quaternion_xyzw(
                [fields[4], fields[5], fields[6], fields[7]],
                Vector3::new(fields[1], fields[2], fields[3]),
            ));
        }
        Ok(Self { stamps, poses })
    }

    pub fn save_tum(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_tum_string()).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load_tum(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        Self::from_tum_str(&text)
    }
}

/// Nearest-neighbor timestamp matching within [`ASSOCIATION_WINDOW`]; each pose is used once.
pub fn associate(est: &Trajectory, gt: &Trajectory) -> Vec<(usize, usize)> {
    let mut candidates = Vec::new();
    for (i, &t) in est.stamps.iter().enumerate() {
        let k = gt.stamps.partition_point(|&s| s < t);
        for j in [k.wrapping_sub(1), k] {
            if let Some(&s) = gt.stamps.get(j) {
                let dt = (s - t).abs();
                if dt <= ASSOCIATION_WINDOW {
                    candidates.push((dt, i, j));
                }
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let (mut used_e, mut used_g) = (vec![false; est.len()], vec![false; gt.len()]);
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_e[i] && !used_g[j] {
            used_e[i] = true;
            used_g[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Closed-form least-squares alignment of `src` onto `dst` (Umeyama).
pub fn align_points(src: &[Vector3<f64>], dst: &[Vector3<f64>], mode: AlignMode) -> Result<AlignmentResult, EvalError> {
    let n = src.len();
    if n != dst.len() {
        return Err(EvalError::LengthMismatch(n, dst.len()));
    }
    if n < MIN_ASSOCIATIONS {
        return Err(EvalError::TooFewAssociations {
            found: n,
            needed: MIN_ASSOCIATIONS,
        });
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() * inv_n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() * inv_n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov *= inv_n;
    var_s *= inv_n;

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sign = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let scale = match mode {
        AlignMode::Se3 => 1.0,
        AlignMode::Sim3 => {
            if var_s <= f64::EPSILON * (1.0 + mu_s.norm_squared()) {
                return Err(EvalError::Degenerate("estimated positions have no spread".into()));
            }
            (svd.singular_values.component_mul(&sign.diagonal())).sum() / var_s
        }
    };
    let translation = mu_d - scale * rotation * mu_s;
    let sq: f64 = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (d - (scale * rotation * s + translation)).norm_squared())
        .sum();
    Ok(AlignmentResult {
        scale,
        rotation,
        translation,
        rmse: (sq * inv_n).sqrt(),
        associations: n,
    })
}

/// Absolute trajectory error: RMSE of aligned positions after associating timestamps.
pub fn ate(est: &Trajectory, gt: &Trajectory, mode: AlignMode) -> Result<AlignmentResult, EvalError> {
    let pairs = associate(est, gt);
    let src: Vec<_> = pairs.iter().map(|&(i, _)| *est.poses[i].translation()).collect();
    let dst: Vec<_> = pairs.iter().map(|&(_, j)| *gt.poses[j].translation()).collect();
    align_points(&src, &dst, mode)
}

/// `Σ_k ‖log(T_k⁻¹ ∘ G_k)‖` over frames with matching timestamps.
pub fn pose_error(est: &Trajectory, gt: &Trajectory) -> Result<f64, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch(est.len(), gt.len()));
    }
    let mut total = 0.0;
    for (index, ((ta, g), (tb, t))) in est.iter().zip(gt.iter()).enumerate() {
        if (ta - tb).abs() > 1e-9 {
            return Err(EvalError::TimestampMismatch { index, a: ta, b: tb });
        }
        let xi = t
            .inverse()
            .compose(g)
            .log()
            .map_err(|e| EvalError::Degenerate(format!("frame {index}: {e}")))?;
        total += xi.norm();
    }
    Ok(total)
}

/// Pose that applies `rotation` and `translation` of an alignment (scale ignored).
pub fn alignment_pose(a: &AlignmentResult) -> PoseSE3 {
    let r = Rotation3::from_matrix_unchecked(a.rotation);
    PoseSE3::from_parts(UnitQuaternion::from_rotation_matrix(&r), a.translation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::Twist;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> PoseSE3 {
        let v: [f64; 6] = std::array::from_fn(|k| rng.random_range(-1.0..1.0) * if k < 3 { 3.0 } else { 1.5 });
        PoseSE3::exp(&Twist::from_slice(&v))
    }

    fn random_traj(n: usize, seed: u64) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poses = (0..n).map(|_| random_pose(&mut rng)).collect();
        Trajectory::new((0..n).map(|k| 0.1 * k as f64).collect(), poses).unwrap()
    }

    #[test]
    fn parses_identity_line() {
        let t = Trajectory::from_tum_str("# header\n0.0 0 0 0 0 0 0 1\n").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.stamps()[0], 0.0);
        assert!((t.poses()[0].to_matrix() - nalgebra::Matrix4::identity()).norm() < 1e-15);
    }

    #[test]
    fn tum_round_trip() {
        let t = random_traj(100, 1);
        let back = Trajectory::from_tum_str(&t.to_tum_string()).unwrap();
        assert_eq!(back.stamps(), t.stamps());
        for (a, b) in back.poses().iter().zip(t.poses()) {
            assert!((a.to_matrix() - b.to_matrix()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn tum_errors_carry_line_numbers() {
        let err = Trajectory::from_tum_str("0 0 0 0 0 0 0 1\n# c\n1 0 0 0 0 0 1\n").unwrap_err();
        assert!(matches!(err, EvalError::Parse { line: 3, .. }));
        let err = Trajectory::from_tum_str("1 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1\n").unwrap_err();
        assert!(matches!(err, EvalError::NonMonotone { line: 2, .. }));
        assert!(Trajectory::from_tum_str("0 0 0 0 0 0 0 0\n").is_err());
        assert!(Trajectory::from_tum_str("0 a 0 0 0 0 0 1\n").is_err());
    }

    #[test]
    fn ate_zero_for_identical() {
        let t = random_traj(20, 2);
        assert!(ate(&t, &t, AlignMode::Se3).unwrap().rmse < 1e-12);
        assert!(ate(&t, &t, AlignMode::Sim3).unwrap().rmse < 1e-12);
    }

    #[test]
    fn ate_invariant_to_rigid_transform() {
        let gt = random_traj(30, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_pose(&mut rng);
        let est = gt.left_transformed(&a);
        assert!(ate(&est, &gt, AlignMode::Se3).unwrap().rmse < 1e-9);
    }

    #[test]
    fn ate_recovers_scale() {
        let gt = random_traj(30, 5);
        let est = gt.scaled(2.0);
        let sim = ate(&est, &gt, AlignMode::Sim3).unwrap();
        assert!(sim.rmse < 1e-9);
        // Alignment maps the estimate onto ground truth, so the recovered factor is 1/2.
        assert!((1.0 / sim.scale - 2.0).abs() < 1e-9);
        assert!(ate(&est, &gt, AlignMode::Se3).unwrap().rmse > 0.1);
    }

    #[test]
    fn too_few_associations() {
        let gt = random_traj(5, 6);
        let shifted = Trajectory::new(gt.stamps().iter().map(|t| t + 0.05).collect(), gt.poses().to_vec()).unwrap();
        assert!(matches!(
            ate(&shifted, &gt, AlignMode::Se3),
            Err(EvalError::TooFewAssociations { found: 0, .. })
        ));
    }

    #[test]
    fn association_tolerates_small_offsets() {
        let gt = random_traj(10, 7);
        let jittered = Trajectory::new(gt.stamps().iter().map(|t| t + 0.015).collect(), gt.poses().to_vec()).unwrap();
        assert_eq!(associate(&jittered, &gt).len(), 10);
        assert!(ate(&jittered, &gt, AlignMode::Se3).unwrap().rmse < 1e-12);
    }

    #[test]
    fn pose_error_examples() {
        let gt = random_traj(4, 8);
        assert!(pose_error(&gt, &gt).unwrap() < 1e-12);
        let mut poses = gt.poses().to_vec();
        poses[2] = poses[2].compose(&PoseSE3::from_translation(Vector3::new(1.0, 0.0, 0.0)));
        let est = Trajectory::new(gt.stamps().to_vec(), poses).unwrap();
        assert!((pose_error(&est, &gt).unwrap() - 1.0).abs() < 1e-12);
        let short = Trajectory::new(gt.stamps()[..3].to_vec(), gt.poses()[..3].to_vec()).unwrap();
        assert!(matches!(pose_error(&short, &gt), Err(EvalError::LengthMismatch(3, 4))));
    }
}
