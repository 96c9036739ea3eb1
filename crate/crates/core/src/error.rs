use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("gradient check failed at coordinate {index} of parameter {param}: {reason}")]
    GradCheck {
        param: usize,
        index: usize,
        reason: String,
    },

    #[error("index {index} out of range for {what} of length {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("layer `{0}` is not an adaptable layer of this backbone")]
    UnknownLayer(String),

    #[error("task `{0}` already exists")]
    DuplicateTask(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("adapter sets cannot be composed; activate exactly one task (got {0})")]
    Composition(usize),

    #[error("backbone fingerprint mismatch: adapter expects {expected}, backbone is {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("bad magic bytes {0:?}, not an AFNR container")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),

    #[error("container truncated while reading {0}")]
    Truncated(&'static str),

    #[error("malformed container: {0}")]
    Malformed(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
