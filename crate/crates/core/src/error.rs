//! Crate-wide error type.

use std::fmt;
use std::io;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by tensor ops, configuration, data ingestion,
/// checkpointing, and training.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested op.
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// A single dimension does not satisfy the op's requirement.
    BadDimension { op: &'static str, detail: String },
    /// An invalid configuration value.
    Config(String),
    /// `backward` called twice on the same graph without a reset.
    DoubleBackward,
    /// A non-finite value reached a point where divergence is fatal.
    Diverged { context: String },
    /// Dataset files missing or malformed.
    Data { file: PathBuf, detail: String },
    /// Evaluation over an empty dataset.
    EmptyDataset,
    /// Checkpoint container problems, kept distinct per failure class.
    CkptMagic,
    CkptVersion { found: u32, supported: u32 },
    CkptTruncated { detail: String },
    CkptShape { name: String, detail: String },
    CkptMissing { key: String },
    CkptParse { detail: String },
    /// A prune spec referenced a channel outside the layer's range.
    BadChannelIndex { layer: usize, index: usize, count: usize },
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, expected, got } => {
                write!(f, "{op}: shape mismatch, expected {expected:?}, got {got:?}")
            }
            Error::BadDimension { op, detail } => write!(f, "{op}: {detail}"),
            Error::Config(msg) => write!(f, "{msg}"),
            Error::DoubleBackward => {
                write!(f, "backward called twice without resetting gradients")
            }
            Error::Diverged { context } => write!(f, "divergence: {context}"),
            Error::Data { file, detail } => {
                write!(f, "dataset error in {}: {detail}", file.display())
            }
            Error::EmptyDataset => write!(f, "evaluation over an empty dataset"),
            Error::CkptMagic => write!(f, "checkpoint: bad magic bytes, not a DCPK file"),
            Error::CkptVersion { found, supported } => {
                write!(f, "checkpoint: unsupported version {found} (supported {supported})")
            }
            Error::CkptTruncated { detail } => write!(f, "checkpoint truncated: {detail}"),
            Error::CkptShape { name, detail } => {
                write!(f, "checkpoint tensor {name}: {detail}")
            }
            Error::CkptMissing { key } => write!(f, "checkpoint: {key}"),
            Error::CkptParse { detail } => write!(f, "checkpoint header: {detail}"),
            Error::BadChannelIndex { layer, index, count } => {
                write!(f, "keep set for layer {layer} references channel {index} of {count}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
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
