use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kinematic model: {0}")]
    InvalidModel(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("scenario generation failed for {archetype} seed {seed}: {reason}")]
    GenerationFailed {
        archetype: String,
        seed: u64,
        reason: String,
    },

    #[error("pose ({x:.3}, {y:.3}) is in collision")]
    PoseInCollision { x: f64, y: f64 },

    #[error("all waypoints collapse onto the origin")]
    DegenerateWaypoints,

    #[error("invalid waypoints: {0}")]
    InvalidWaypoints(String),

    #[error("invalid MPC problem: {0}")]
    InvalidProblem(String),

    #[error("Riccati recursion ill-conditioned (regularization {0:e} exceeded cap)")]
    IllConditioned(f64),

    #[error("auxiliary LQR for the backward pass is singular (regularization {0:e} exceeded cap)")]
    SingularFeedback(f64),

    #[error("activation cache does not match parameters: {0}")]
    CacheMismatch(String),

    #[error("parameter file format error: {0}")]
    Format(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("every sample in the batch failed: {0}")]
    AllSamplesFailed(String),

    #[error("too many failed samples in batch ({failed}/{total})")]
    BatchFailureRate { failed: usize, total: usize },

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
