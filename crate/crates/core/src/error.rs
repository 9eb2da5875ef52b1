use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// Variants are grouped by the exit code the command-line front end maps
/// them to: data problems (2) and numeric failures (3). Usage errors never
/// reach this type; argument parsing handles them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("{path}: io error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: expected 16-bit single-channel PNG, found {found}")]
    BitDepth { path: PathBuf, found: String },

    #[error("{path}: PNG decode failed: {message}")]
    Png { path: PathBuf, message: String },

    #[error("missing metadata sidecar {0}")]
    MissingMetadata(PathBuf),

    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("crop contains no valid depth pixels")]
    EmptyCloud,

    #[error("sample count {k} out of range 1..={available}")]
    SampleCountOutOfRange { k: usize, available: usize },

    #[error("non-finite value in layer `{layer}`")]
    NonFinite { layer: String },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("degenerate negative: anchor-negative distance {0:e} below division guard")]
    DegenerateNegative(f64),

    #[error("batch has no anchor with both a positive and a negative")]
    NoValidAnchors,

    #[error("trace does not belong to these parameters: {0}")]
    TraceMismatch(String),

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("identity rejection budget of {0} draws exhausted")]
    RejectionBudget(usize),

    #[error("animal footprint leaves the camera frustum: {0}")]
    OutsideFrustum(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for failures caused by numerical breakdown rather than bad data.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::DegenerateNegative(_)
        )
    }
}
