//! Geometric core of a dense bundle adjustment SLAM system.
//!
//! Poses and per-pixel inverse depths are refined by damped Gauss-Newton
//! against revised correspondence fields over a dynamic frame graph. The
//! learned component that would normally produce those fields is replaced by
//! a synthetic [`oracle`] driven by ground truth.

pub mod camera;
pub mod correspondence;
pub mod dba;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod oracle;
pub mod se3;
pub mod slam;

pub use camera::{HomogeneousPoint, InverseDepthMap, Intrinsics};
pub use correspondence::{CorrespondenceField, PixelGrid};
pub use dba::{BAProblem, EdgeObservation, LinearSystemBlocks, Updates};
pub use error::{CameraError, EvalError, SceneError, Se3Error, SlamError, SolverError};
pub use se3::{PoseSE3, Twist};
pub use oracle::{NoiseModel, SceneOracle, SyntheticScene};
pub use graph::{DistanceMatrix, FrameGraph, Keyframe};
pub use eval::{AlignMode, AlignmentResult, Trajectory};
pub use slam::{Mode, Profile, SystemConfig, SystemState};
pub use experiment::{ExperimentConfig, Metrics, SweepAxis};
