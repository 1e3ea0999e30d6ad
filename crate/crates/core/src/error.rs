use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
///
/// `Contract` marks a violated precondition (caller bug), everything else is
/// an environment or data problem. The CLI maps the two classes to distinct
/// exit codes via [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error on {path}: {message}")]
    Png { path: PathBuf, message: String },

    #[error(transparent)]
    Manifest(#[from] ManifestError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("non-finite loss at iteration {iteration} during {stage}; last periodic checkpoint retained")]
    NonFiniteLoss { stage: String, iteration: u64 },

    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
}

impl Error {
    /// Shorthand for a precondition failure.
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for contract violations and invalid data,
    /// 2 for i/o failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Png { .. } => 2,
            Error::Manifest(ManifestError::MissingFile { .. }) => 2,
            _ => 1,
        }
    }
}

/// Validation failures for dataset manifests, one variant per invariant.
#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("manifest file missing: {path}")]
    MissingFile { path: PathBuf },

    #[error("manifest header invalid: {0}")]
    Header(String),

    #[error("manifest line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("duplicate record id {id}")]
    DuplicateId { id: u64 },

    #[error("record {id} references missing or undecodable file {path}")]
    DanglingPath { id: u64, path: PathBuf },

    #[error("clean-pool entry missing or undecodable: {path}")]
    DanglingCleanPath { path: PathBuf },

    #[error("clean-pool entry {path} is also a groundtruth image; pools must be disjoint")]
    CleanPoolOverlap { path: PathBuf },
}

/// Failures while reading or writing checkpoint containers.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic bytes; not a checkpoint file")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint truncated or offsets inconsistent")]
    Truncated,

    #[error("checkpoint holds a {found} network, expected {expected}")]
    KindMismatch { expected: String, found: String },

    #[error("checkpoint spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("tensor name mismatch: {0}")]
    NameMismatch(String),
}
