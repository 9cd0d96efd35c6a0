//! Error taxonomy shared by every module in the crate.
//!
//! The variants map onto the failure classes surfaced to callers: shape
//! mismatches, violated preconditions, misuse of stateful objects (e.g.
//! running a backward pass twice), and the distinct I/O failures of the
//! checkpoint and dataset containers.

use std::fmt;
use std::io;

#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible; names both shapes.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A precondition on the inputs was violated.
    Contract(String),
    /// A stateful object was used out of order (e.g. double backward).
    State(String),
    /// Underlying file I/O failed.
    Io(io::Error),
    /// A serialized container had an unreadable or inconsistent header.
    MalformedHeader(String),
    /// The trailing checksum of a serialized container did not match.
    ChecksumMismatch { expected: u32, actual: u32 },
    /// A container declared a format version this build cannot read.
    UnsupportedVersion(u32),
    /// An artifact that must never change was observed to change.
    Integrity(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::State(msg) => write!(f, "invalid state: {msg}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::MalformedHeader(msg) => write!(f, "malformed header: {msg}"),
            Error::ChecksumMismatch { expected, actual } => {
                write!(f, "checksum mismatch: expected {expected:#010x}, found {actual:#010x}")
            }
            Error::UnsupportedVersion(v) => write!(f, "unsupported format version {v}"),
            Error::Integrity(msg) => write!(f, "integrity violation: {msg}"),
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

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}
