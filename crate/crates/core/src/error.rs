use std::path::PathBuf;

use dtmerge_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence of {len} positions exceeds context of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("unknown layer selector `{0}`")]
    UnknownSelector(String),
    #[error("selector `{0}` matches no parameters")]
    EmptySelection(String),
    #[error("incompatible parameters: {}", .0.join(", "))]
    Incompatible(Vec<String>),
    #[error("coefficient {0} outside [0, 1]")]
    Coefficient(f32),
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("degenerate normalization references: {0}")]
    DegenerateReferences(String),
    #[error("empty sequence")]
    EmptySequence,
    #[error("non-finite loss at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u16, supported: u16 },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("trajectory of {len} steps is shorter than one window of {window}")]
    TrajectoryTooShort { len: usize, window: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
