use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed or missing key in a header / manifest.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// Header dimensions disagree with the binary payload.
    #[error("size mismatch in {path}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    /// A value the toolkit deliberately does not handle.
    #[error("unsupported {what}: {value}")]
    Unsupported { what: String, value: String },

    /// Shape disagreement between operands.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Index outside its valid range.
    #[error("index out of range: {0}")]
    Index(String),

    /// Configuration violates a documented invariant.
    #[error("invalid config: {0}")]
    Config(String),

    /// Reassembly found a voxel no patch covers.
    #[error("uncovered voxel at (line {line}, sample {sample}, band {band})")]
    Coverage {
        line: usize,
        sample: usize,
        band: usize,
    },

    /// Metric has no defined value for the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Non-finite value where finite data is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Sampler state blew up.
    #[error("numerical overflow at step {t}: max |x| = {max_abs:e}")]
    Overflow { t: usize, max_abs: f64 },

    /// Checkpoint container is damaged or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Loss stayed above the divergence threshold for too long.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Weight inflation could not match a 2D source to a 3D layer.
    #[error("inflation error in layer {layer}: {detail}")]
    Inflation { layer: String, detail: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
