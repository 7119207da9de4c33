use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two rasters (or a raster and a parameter block) disagree in size.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A caller violated an operation's contract (wrong channel count, even kernel size, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value is outside the mathematical domain of the operation (non-positive depth, NaN, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Not enough valid data to compute anything (empty mask, too few pixels).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// The least-squares system is rank-deficient or too badly conditioned.
    #[error("degenerate system (condition {condition:.3e}): {reason}")]
    Degenerate { condition: f64, reason: String },

    /// An iterative procedure produced a non-finite loss.
    #[error("diverged at iteration {iteration}: loss trace {trace:?}")]
    Divergence { iteration: usize, trace: Vec<f64> },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("manifest error in field `{field}`: {message}")]
    Manifest { field: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
