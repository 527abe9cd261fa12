use std::path::PathBuf;

/// Errors produced anywhere in the extraction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("cannot load image for sample `{sample}`: {message}")]
    ImageLoad { sample: String, message: String },

    #[error("split `{0}` contains no samples")]
    EmptySplit(String),

    #[error("sample `{sample}`: entity `{entity}` is not part of the schema")]
    SchemaMismatch { sample: String, entity: String },

    #[error("sample `{sample}`: {violation}")]
    Validation { sample: String, violation: String },

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("shape mismatch on {axis}: expected {expected}, got {actual}")]
    Shape {
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite {part} loss ({value})")]
    NonFinite { part: &'static str, value: f64 },

    #[error("invalid gold tag sequence: {0}")]
    InvalidTags(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
