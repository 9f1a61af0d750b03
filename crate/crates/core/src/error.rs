use std::path::PathBuf;

/// Errors raised by the library.
///
/// Input problems (bad files, shape mismatches, unknown prompts) and
/// contract violations share one enum so callers can match on the
/// variant they care about and bubble up the rest.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("bad {format} container: {reason}")]
    Format {
        format: &'static str,
        reason: String,
    },

    #[error("size mismatch for {what}: expected {expected}, got {got}")]
    SizeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("prompt `{0}` has no class mapping")]
    UnknownPrompt(String),

    #[error("detection refers to view `{0}` which the frame does not carry")]
    ViewMismatch(String),

    #[error("pose is not a rigid transform: {0}")]
    SingularPose(String),

    #[error("empty index set for {0}")]
    EmptySet(&'static str),

    #[error("no foreground point has an initialized prototype")]
    NoUsablePrototypes,

    #[error("validation failed: {0}")]
    Invalid(String),
}

impl Error {
    /// Attach a file path to an error so the message names the culprit.
    pub fn at(self, path: impl Into<PathBuf>) -> Error {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Error {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
