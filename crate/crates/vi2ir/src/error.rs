use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A spec or config field failed validation. Always names the field.
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    /// A caller violated an operation precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Internal shape bookkeeping went wrong (indicates a bug, not bad input).
    #[error("internal shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Dataset layout or content problem.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Checkpoint file has an incompatible format version.
    #[error("checkpoint version mismatch: {0}")]
    CheckpointVersion(String),

    /// Checkpoint file is corrupt or truncated; nothing was loaded.
    #[error("checkpoint integrity failure: {0}")]
    CheckpointIntegrity(String),

    /// Training produced a non-finite loss and aborted.
    #[error("non-finite loss at step {step} ({detail})")]
    NonFinite { step: u64, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by user input (configs, paths, malformed files)
    /// as opposed to runtime aborts. CLI maps these to distinct exit codes.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::Precondition(_)
                | Error::Dataset(_)
                | Error::CheckpointVersion(_)
                | Error::CheckpointIntegrity(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
