//! Error type shared by every module in the crate.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensors, quantization, adapters, training, and I/O.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A matrix constructor received a zero-sized dimension.
    InvalidDimensions { rows: usize, cols: usize },
    /// Data length does not match the requested shape.
    DataLength {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    /// Two matrices cannot be combined under the named operation.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A non-finite value reached an operation that requires finite input.
    NonFinite { context: &'static str },
    /// A scalar or count argument is outside its valid range.
    InvalidArgument { context: String },
    /// A requested adapter rank is outside the configured interval.
    RankOutOfRange {
        rank: usize,
        min: usize,
        max: usize,
    },
    /// An operation received an empty collection it cannot act on.
    EmptyInput { context: &'static str },
    /// The training loss became non-finite; the step was aborted.
    NonFiniteLoss { step: u64, rank: usize },
    /// A forward context was replayed against a layer whose parameters
    /// changed since the context was captured.
    StaleContext { expected: u64, got: u64 },
    /// Underlying file-system failure, with the path that triggered it.
    Io { path: String, message: String },
    /// The file does not start with the container magic bytes.
    BadMagic { found: [u8; 4] },
    /// The container was written by an unsupported format version.
    VersionMismatch { found: u32, supported: u32 },
    /// A blob failed its integrity check.
    ChecksumMismatch { blob: String },
    /// The file ended before the named blob was fully read.
    UnexpectedEof { blob: String },
    /// Header or blob contents are structurally inconsistent.
    CorruptContainer { message: String },
    /// The container holds a different kind of payload than requested.
    WrongContainerKind {
        expected: &'static str,
        found: String,
    },
    /// One or more problems found while validating a run configuration.
    /// Collected exhaustively rather than failing on the first.
    ConfigInvalid { problems: Vec<String> },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidDimensions { rows, cols } => {
                write!(f, "invalid matrix dimensions {rows}x{cols}: both must be positive")
            }
            Error::DataLength {
                rows,
                cols,
                expected,
                got,
            } => write!(
                f,
                "data length {got} does not match shape {rows}x{cols} (expected {expected})"
            ),
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: incompatible shapes {}x{} and {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::NonFinite { context } => {
                write!(f, "non-finite value in {context}")
            }
            Error::InvalidArgument { context } => write!(f, "invalid argument: {context}"),
            Error::RankOutOfRange { rank, min, max } => {
                write!(f, "rank {rank} outside valid interval [{min}, {max}]")
            }
            Error::EmptyInput { context } => write!(f, "empty input: {context}"),
            Error::NonFiniteLoss { step, rank } => {
                write!(f, "non-finite loss at step {step} (rank {rank}); step aborted")
            }
            Error::StaleContext { expected, got } => write!(
                f,
                "forward context is stale: captured at generation {got}, layer is at {expected}"
            ),
            Error::Io { path, message } => write!(f, "i/o error on {path}: {message}"),
            Error::BadMagic { found } => {
                write!(f, "bad magic bytes {found:?}: not a QDLR container")
            }
            Error::VersionMismatch { found, supported } => write!(
                f,
                "container version {found} not supported (this build reads version {supported})"
            ),
            Error::ChecksumMismatch { blob } => {
                write!(f, "checksum mismatch in blob {blob}")
            }
            Error::UnexpectedEof { blob } => {
                write!(f, "unexpected end of file while reading blob {blob}")
            }
            Error::CorruptContainer { message } => write!(f, "corrupt container: {message}"),
            Error::WrongContainerKind { expected, found } => {
                write!(f, "container holds {found:?}, expected {expected:?}")
            }
            Error::ConfigInvalid { problems } => {
                writeln!(f, "configuration invalid ({} problems):", problems.len())?;
                for p in problems {
                    writeln!(f, "  - {p}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    /// Wrap an I/O failure with the path that triggered it.
    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}
