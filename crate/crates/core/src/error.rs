use thiserror::Error;

/// Errors produced by the estimation library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid grid resolution {0}: must be a power of two >= 4")]
    InvalidGrid(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("linear solve did not reach tolerance: relative residual {residual:.3e}")]
    SolveTolerance { residual: f64 },

    #[error("invalid parameter box: lo must be strictly below hi in every coordinate")]
    InvalidBox,

    #[error("parameter {0:?} lies outside the model's parameter box")]
    ParameterOutOfBox(Vec<f64>),

    #[error("loss of ellipticity: coefficient lower bound r = {0:.3e} <= 0")]
    EllipticityLost(f64),

    #[error("coefficient vector has {got} entries but the partition has {expected} cells")]
    PartitionMismatch { expected: usize, got: usize },

    #[error("snapshot set must contain at least one sample")]
    EmptySnapshotSet,

    #[error("{0}")]
    InvalidMeasurement(String),

    #[error("measurement functionals are numerically dependent (Gram condition {cond:.3e})")]
    DependentFunctionals { cond: f64 },

    #[error("reduced basis dimension {n} exceeds measurement dimension {m}")]
    BasisExceedsMeasurements { n: usize, m: usize },

    #[error("cross-Gramian is numerically singular (sigma_min {sigma_min:.3e}, sigma_max {sigma_max:.3e}); use a smaller reduced dimension")]
    SingularCrossGramian { sigma_min: f64, sigma_max: f64 },

    #[error("all cells failed during reconstruction: {0}")]
    AllCellsFailed(String),

    #[error("family must allow at least one cell (got K_max = 0)")]
    EmptyBudget,

    #[error("ill-conditioned S(W) Gram in the v-step (condition {cond:.3e})")]
    IllConditionedVStep { cond: f64 },

    #[error("artifact format mismatch: found version {found}, supported {supported}")]
    ArtifactVersion { found: u32, supported: u32 },

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
