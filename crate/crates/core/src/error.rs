use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label out of range: {0}")]
    LabelRange(String),
    #[error("generator error: {0}")]
    Generator(String),
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("mode error: {0}")]
    Mode(String),
    #[error("slot roles inconsistent with class counts: {0}")]
    RoleMismatch(String),
    #[error("non-finite loss at batch {batch}: {detail}")]
    NonFiniteLoss { batch: String, detail: String },
    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
