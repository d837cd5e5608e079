use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector at index {index} has norm below 1e-12")]
    ZeroVector { index: usize },

    #[error("vector at index {index} has norm {norm}, expected unit length")]
    NotUnit { index: usize, norm: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid resampling target {target_h}x{target_w} for source {src_h}x{src_w}")]
    InvalidTarget {
        src_h: usize,
        src_w: usize,
        target_h: usize,
        target_w: usize,
    },

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("degenerate priors: {0}")]
    DegeneratePriors(String),

    #[error("no decision boundary: solved squared distance {0} is negative")]
    NoBoundary(f64),

    #[error("foreground count {count} exceeds pixel count {pixels}")]
    CountOutOfRange { count: usize, pixels: usize },

    #[error("no episode records given")]
    EmptyRecords,

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    BadVersion(u16),

    #[error("payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("vector {index} has norm {norm}, outside unit tolerance")]
    NormViolation { index: usize, norm: f64 },

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the filesystem rather than by the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
