use std::path::PathBuf;

/// Error classes surfaced by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum PdfnetError {
    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("augmentation failed: {0}")]
    Augment(String),

    #[error("numerics error: {0}")]
    Numerics(String),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PdfnetError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PdfnetError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        PdfnetError::Shape(msg.into())
    }

    /// Prefixes a shape error with the stage it came from; other errors pass through.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            PdfnetError::Shape(msg) => PdfnetError::Shape(format!("{stage}: {msg}")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, PdfnetError>;
