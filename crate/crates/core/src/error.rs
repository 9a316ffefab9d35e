use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure category, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing manifest: {0}")]
    MissingManifest(PathBuf),

    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("row count mismatch in {what}: expected {expected}, found {found}")]
    RowCountMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("label {label} at sample {sample} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        sample: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("non-finite value in layer {layer} at row {row}, column {col}")]
    NonFinite { layer: String, row: usize, col: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {class} has {count} samples, need at least {required}")]
    InsufficientClassSamples {
        class: usize,
        count: usize,
        required: usize,
    },

    #[error("point {0} has zero norm and cannot be indexed under cosine distance")]
    ZeroVector(usize),

    #[error("requested {k} neighbors but only {available} are available")]
    KTooLarge { k: usize, available: usize },

    #[error("empty {conditioning} cell for layer {layer}, class {class}")]
    EmptyCell {
        layer: usize,
        class: usize,
        conditioning: &'static str,
    },

    #[error("null cell ({conditioning}, class {class}, slot {slot}) has {count} samples, need {required}")]
    InsufficientNull {
        conditioning: &'static str,
        class: usize,
        slot: usize,
        count: usize,
        required: usize,
    },

    #[error("zero p-value cannot be combined")]
    ZeroPValue,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged after epoch {last_finite_epoch}")]
    Diverged { last_finite_epoch: usize },

    #[error("input is not correctly classified ({0})")]
    InitiallyMisclassified(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) => ErrorKind::Usage,
            Error::ZeroPValue
            | Error::Numerical(_)
            | Error::Diverged { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
