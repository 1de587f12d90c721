use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid coordinate: {0:?}")]
    InvalidCoordinate([f64; 3]),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-invertible transform: {0}")]
    NonInvertible(String),

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("overlapping phantom regions: {0}")]
    Overlap(String),

    #[error("missing data: {0}")]
    Missing(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("nifti: {0}")]
    Nifti(String),

    #[error("gradient table {path}: {msg}")]
    GradientTable { path: PathBuf, msg: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
