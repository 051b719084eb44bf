use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no samples")]
    NoSamples,

    #[error("invalid feature: non-finite entry at row {row}, column {col}")]
    InvalidFeature { row: usize, col: usize },

    #[error("not symmetric: max asymmetry {0:e}")]
    NotSymmetric(f64),

    #[error("degenerate covariance: factorization failed after jitter")]
    DegenerateCovariance,

    #[error("degenerate source: pre-drift covariance cannot be whitened")]
    DegenerateSource,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty statistics list")]
    EmptyStats,

    #[error("length mismatch: {left} pre statistics vs {right} post statistics")]
    LengthMismatch { left: usize, right: usize },

    #[error("degenerate prompt: pooled tokens project to the zero vector")]
    DegeneratePrompt,

    #[error("cancelled embedding: class and task encodings sum to zero")]
    CancelledEmbedding,

    #[error("unknown label {0}")]
    UnknownLabel(u32),

    #[error("unknown task {0}")]
    UnknownTask(u32),

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("schedule must have at least one step")]
    ZeroSteps,

    #[error("empty prediction set")]
    EmptyEmbeddings,

    #[error("invalid encoder dimensions: d_in = {d_in}, d_out = {d_out}")]
    InvalidDims { d_in: usize, d_out: usize },

    #[error("degenerate input: row {0} projects to the zero vector")]
    DegenerateInput(usize),

    #[error("contrastive loss undefined for batch size {0}")]
    ContrastiveUndefined(usize),

    #[error("missing anchor for class {0}")]
    MissingAnchor(u32),

    #[error("empty task data")]
    EmptyTask,

    #[error("class {0} has no samples")]
    MissingClassSamples(u32),

    #[error("not class-incremental: class {class} already belongs to task {task}")]
    NotClassIncremental { class: u32, task: u32 },

    #[error("empty evaluation set for task {0}")]
    EmptyEvalSet(u32),

    #[error("incomplete accuracy matrix: {0}")]
    IncompleteMatrix(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid stream spec: {0}")]
    InvalidSpec(String),

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("label {label} in {path} is not listed in the manifest")]
    LabelNotInManifest { label: i64, path: PathBuf },

    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
