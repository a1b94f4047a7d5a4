use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid supernet spec: {0}")]
    InvalidSpec(String),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("invalid depth bins: {0}")]
    InvalidBins(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("need at least {min} runs to aggregate, got {got}")]
    TooFewRuns { got: usize, min: usize },
    #[error("reference {reference} has {count} measurements, need at least 2")]
    InsufficientHistory { reference: usize, count: usize },
    #[error("quality control failed for batches {batches:?} after {attempts} re-measurement attempts")]
    QcFailed { batches: Vec<String>, attempts: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("input length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite training loss at epoch {epoch} (last finite loss {last_finite})")]
    NonFiniteLoss { epoch: usize, last_finite: f64 },
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Persist(#[from] PersistError),
}

/// Failures raised by a measurement backend for a whole batch.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("batch {batch_id}: backend command could not be started: {message}")]
    Spawn { batch_id: String, message: String },
    #[error("batch {batch_id}: backend exited with status {status}: {stderr}")]
    NonZeroExit { batch_id: String, status: i32, stderr: String },
    #[error("batch {batch_id}: backend timed out after {seconds} s")]
    Timeout { batch_id: String, seconds: u64 },
    #[error("batch {batch_id}: malformed response: {message}")]
    Malformed { batch_id: String, message: String },
    #[error("batch {batch_id}: response has no result for arch {arch_id}")]
    MissingArch { batch_id: String, arch_id: String },
    #[error("batch {batch_id}: arch {arch_id} returned {got} runs, requested {expected}")]
    RunCount { batch_id: String, arch_id: String, expected: usize, got: usize },
    #[error("batch {batch_id}: {failed} of {total} archs failed, tolerance exceeded")]
    TooManyFailures { batch_id: String, failed: usize, total: usize },
}

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported format version {found} (this build reads up to {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("checksum error: {0}")]
    Checksum(String),
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },
}
