use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// An invariant that the library itself should uphold was violated.
    #[error("internal error: {0}")]
    Internal(String),

    /// A loss or metric became NaN/inf during training.
    #[error("numeric failure: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Cube(#[from] CubeError),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Error)]
pub enum CubeError {
    #[error("not an HSIC cube file (bad magic)")]
    BadMagic,

    #[error("HSIC version {0} is not supported")]
    UnsupportedVersion(u16),

    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),

    #[error("cube dimensions {h}x{w}x{b} are zero or overflow")]
    DimOverflow { h: u64, w: u64, b: u64 },

    #[error("truncated cube file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn arg_err(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}
