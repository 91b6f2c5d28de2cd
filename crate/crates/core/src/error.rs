use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("loss node must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("unknown parameter segment `{0}`")]
    UnknownSegment(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid camera pose: {0}")]
    SingularPose(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iteration} (L_c={color_loss}, L_s={smooth_loss})")]
    NonFiniteLoss {
        iteration: usize,
        color_loss: f64,
        smooth_loss: f64,
    },

    #[error("non-finite gradient in segment `{0}`")]
    NonFiniteGradient(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
