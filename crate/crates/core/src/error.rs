use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the framework.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not line up for an operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// Problems with the dataset layout, index sidecar or image files.
    #[error("data error: {0}")]
    Data(String),

    #[error("image {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    /// Non-finite numbers showed up during training.
    #[error("training fault in phase {phase}, epoch {epoch}, batch {batch}: {detail}")]
    TrainingFault {
        phase: u8,
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("run for seed {seed} failed: {source}")]
    SeedRun {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while reading or validating a checkpoint file.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint has bad magic bytes (expected CBAMNET1)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is truncated: {0}")]
    Truncated(String),
    #[error("checkpoint parameter names do not match the model: {0}")]
    NameSetMismatch(String),
    #[error("checkpoint config differs at `{field}`: expected {expected}, found {found}")]
    ConfigMismatch {
        field: String,
        expected: String,
        found: String,
    },
    #[error("malformed checkpoint manifest: {0}")]
    Malformed(String),
}
