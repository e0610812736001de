use thiserror::Error;

/// Faults raised anywhere in the inversion / design / calibration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("non-finite source value {value} at node (ix={ix}, iy={iy})")]
    NonFiniteSource { ix: usize, iy: usize, value: f64 },

    #[error("solver became unstable at substep {substep} (t = {time}); refine the grid or reduce the step factors")]
    Unstable { substep: usize, time: f64 },

    #[error("location ({x}, {y}) lies outside the domain [{min}, {max}]^2")]
    OutsideDomain { x: f64, y: f64, min: f64, max: f64 },

    #[error("likelihood underflow: the measurement is inconsistent with every grid node")]
    LikelihoodUnderflow,

    #[error("absolute continuity violated at node {node}: p > 0 where q = 0")]
    AbsoluteContinuity { node: usize },

    #[error("parameter grids differ")]
    GridMismatch,

    #[error("no cached prediction for design ({x}, {y}, t={t})")]
    MissingPrediction { x: f64, y: f64, t: f64 },

    #[error("candidate list is empty")]
    EmptyCandidates,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("forward map returned a non-finite value for ensemble member {member}")]
    NonFiniteForward { member: usize },

    #[error("undefined relative error: the reference field is identically zero")]
    UndefinedRelativeError,

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 for configuration problems, 3 for
    /// numerical faults.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) | Error::Io { .. } | Error::Csv(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
