use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension error: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("gradient check: non-finite value while probing input {input} at coordinate {coord}")]
    ProbeNonFinite { input: usize, coord: usize },

    #[error("invalid image size {width}x{height}")]
    InvalidImage { width: f64, height: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("joint {joint} at frame {frame} lies behind the camera")]
    BehindCamera { frame: usize, joint: usize },

    #[error("{path}: bad magic bytes")]
    BadMagic { path: String },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version { path: String, found: u32, expected: u32 },

    #[error("{path}: truncated file")]
    Truncated { path: String },

    #[error("checksum mismatch in clip {clip}")]
    Checksum { clip: String },

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non-finite",
            Error::Contract(_) => "contract",
            Error::ProbeNonFinite { .. } => "probe-non-finite",
            Error::InvalidImage { .. } => "invalid-image",
            Error::Config(_) => "config",
            Error::BehindCamera { .. } => "behind-camera",
            Error::BadMagic { .. } => "bad-magic",
            Error::Version { .. } => "version",
            Error::Truncated { .. } => "truncated",
            Error::Checksum { .. } => "checksum",
            Error::Malformed { .. } => "malformed",
            Error::MissingCheckpoint(_) => "missing-checkpoint",
            Error::IncompatibleCheckpoint(_) => "incompatible-checkpoint",
            Error::NonFiniteGradient { .. } => "non-finite-gradient",
            Error::Io(_) => "io",
        }
    }
}
