use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes used by the command line to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("rotation matrix is not orthonormal with positive determinant")]
    NonOrthonormalInput,

    #[error("rotation has no Euler decomposition with all angles in [-90, 90] degrees")]
    PoseOutOfRange,

    #[error("projected shape collapsed to extent {extent:e}")]
    DegenerateProjection { extent: f64 },

    #[error("degenerate landmarks: {0}")]
    DegenerateInput(String),

    #[error("bounding box does not overlap the image")]
    EmptyIntersection,

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("non-finite shape update at stage {stage}, fern {fern}")]
    NonFiniteUpdate { stage: usize, fern: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("declared {declared} points but found {actual}")]
    CountMismatch { declared: usize, actual: usize },

    #[error("normalizing distance is zero")]
    ZeroNormalizer,

    #[error("model file: {0}")]
    Model(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn mismatch(expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonFiniteLoss { .. }
            | Error::NonFiniteUpdate { .. }
            | Error::NonOrthonormalInput
            | Error::DegenerateProjection { .. } => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }

    /// Short stable identifier for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::NonOrthonormalInput => "non_orthonormal_input",
            Error::PoseOutOfRange => "pose_out_of_range",
            Error::DegenerateProjection { .. } => "degenerate_projection",
            Error::DegenerateInput(_) => "degenerate_input",
            Error::EmptyIntersection => "empty_intersection",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::NonFiniteUpdate { .. } => "non_finite_update",
            Error::Parse { .. } => "parse_error",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::ZeroNormalizer => "zero_normalizer",
            Error::Model(_) => "model_error",
            Error::Io { .. } => "io_error",
            Error::Json(_) => "json_error",
            Error::Csv(_) => "csv_error",
            Error::Image(_) => "image_error",
        }
    }
}
