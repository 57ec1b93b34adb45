use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Se3Error {
    #[error("rotation angle {angle} is too close to pi for a unique logarithm")]
    DegenerateRotation { angle: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CameraError {
    #[error("inverse depth must be positive and finite (got {0})")]
    NonPositiveDepth(f64),
    #[error("focal lengths must be positive (fx={fx}, fy={fy})")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    #[error("depth map of {width}x{height} requires {expected} values, got {actual}")]
    DimensionMismatch {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error(
        "reduced pose system is not positive definite (dim {dim}, min eigenvalue {min_eigenvalue:e}, max eigenvalue {max_eigenvalue:e})"
    )]
    IllConditioned {
        dim: usize,
        min_eigenvalue: f64,
        max_eigenvalue: f64,
    },
    #[error("edge ({0}, {1}) references a frame outside the problem")]
    UnknownFrame(usize, usize),
    #[error("edge ({0}, {0}) is a self-edge")]
    SelfEdge(usize),
    #[error("observation for edge ({i}, {j}) has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        i: usize,
        j: usize,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("frame {0} appears in more than one rig pair")]
    OverlappingRig(usize),
    #[error("update vector has {got} entries, expected {expected}")]
    UpdateSize { got: usize, expected: usize },
    #[error("iteration count must be at least 1")]
    NoIterations,
    #[error("prior weight must be finite and non-negative (got {0})")]
    InvalidWeight(f64),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("unsatisfiable scene configuration: {0}")]
    Unsatisfiable(String),
    #[error("invalid scene configuration: {0}")]
    InvalidConfig(String),
    #[error("scene file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("timestamps must be strictly increasing (line {line}: {prev} then {next})")]
    NonMonotone { line: usize, prev: f64, next: f64 },
    #[error("only {found} associated poses, need at least {needed}")]
    TooFewAssociations { found: usize, needed: usize },
    #[error("trajectories have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("timestamps differ at index {index} ({a} vs {b})")]
    TimestampMismatch { index: usize, a: f64, b: f64 },
    #[error("degenerate alignment: {0}")]
    Degenerate(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SlamError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("frame timestamp {next} does not follow {prev}")]
    OutOfOrder { prev: f64, next: f64 },
    #[error("operation requires phase {expected}, system is {actual}")]
    WrongPhase {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("initialization diverged: cost grew from {initial:e} to {last:e}")]
    Diverged { initial: f64, last: f64 },
    #[error("non-keyframe {frame} has no covisible keyframe")]
    NoCovisibleKeyframe { frame: usize },
    #[error("invalid system configuration: {0}")]
    InvalidConfig(String),
    #[error("frame {0} is not part of the scene")]
    UnknownFrame(usize),
}
