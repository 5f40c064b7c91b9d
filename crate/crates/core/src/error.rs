//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced non-finite values.
    #[error("numeric failure in `{op}`: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Container has wrong magic bytes.
    #[error("bad magic bytes: not a recognized container")]
    BadMagic,

    /// Container declares a format version this build cannot read.
    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    /// Stored checksum does not match the payload.
    #[error("checksum mismatch: container is corrupt")]
    ChecksumMismatch,

    /// Container ended early or declared impossible section lengths.
    #[error("truncated or malformed container: {0}")]
    Truncated(String),

    /// Malformed container content (valid framing, bad payload).
    #[error("malformed data: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 2 config/usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::BadMagic
            | Error::UnsupportedVersion { .. }
            | Error::ChecksumMismatch
            | Error::Truncated(_)
            | Error::Malformed(_)
            | Error::Io(_) => 3,
            Error::Numeric { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
