//! Crate-wide error type.
//!
//! Every fallible operation in the library returns [`Result`]. Variants are
//! grouped by failure class rather than by module so that callers (tests,
//! the CLI) can match on what went wrong instead of where.

use std::fmt;

/// Unified error for tensor math, flow evaluation, coding, and I/O.
#[derive(Debug)]
pub enum Error {
    /// An operand's shape does not satisfy the named operation's contract.
    Shape {
        /// Operation that rejected its input, e.g. `"conv2d"`.
        op: &'static str,
        /// Human-readable description including the offending shapes.
        detail: String,
    },
    /// An operand's *values* are outside the operation's domain
    /// (non-integer pixels, non-positive scale, NaN where finite required).
    Domain {
        /// Operation that rejected its input.
        op: &'static str,
        detail: String,
    },
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// A text or binary input could not be parsed. `offset` is the byte
    /// position at which parsing failed.
    Parse { what: String, offset: usize },
    /// A structured artifact (bitstream, checkpoint, raw tensor file) is
    /// malformed: bad magic, truncation, inconsistent lengths.
    Format { what: String },
    /// A bitstream was produced by a different model than the one supplied
    /// for decoding.
    FingerprintMismatch { expected: u64, found: u64 },
    /// Checkpoint content hash does not match its payload.
    HashMismatch { expected: u64, found: u64 },
    /// Artifact version byte is not supported by this build.
    VersionMismatch { found: u8, supported: u8 },
    /// Training aborted (non-finite loss, empty dataset, bad config).
    Train { detail: String },
    /// Experiment configuration is invalid (unknown key, bad value).
    Config { detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape error: {detail}"),
            Error::Domain { op, detail } => write!(f, "{op}: domain error: {detail}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Parse { what, offset } => {
                write!(f, "parse error at byte {offset}: {what}")
            }
            Error::Format { what } => write!(f, "malformed artifact: {what}"),
            Error::FingerprintMismatch { expected, found } => write!(
                f,
                "model fingerprint mismatch: bitstream was written by model \
                 {found:#018x}, but the supplied model is {expected:#018x}"
            ),
            Error::HashMismatch { expected, found } => write!(
                f,
                "checkpoint content hash mismatch (stored {found:#018x}, \
                 recomputed {expected:#018x}); file is corrupt or truncated"
            ),
            Error::VersionMismatch { found, supported } => write!(
                f,
                "unsupported artifact version {found} (this build reads version {supported})"
            ),
            Error::Train { detail } => write!(f, "training aborted: {detail}"),
            Error::Config { detail } => write!(f, "invalid configuration: {detail}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Convenience constructor for [`Error::Shape`].
pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

/// Convenience constructor for [`Error::Domain`].
pub(crate) fn domain_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Domain {
        op,
        detail: detail.into(),
    }
}
