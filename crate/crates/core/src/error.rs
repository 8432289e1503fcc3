use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("domain error in {op}: {reason}")]
    Domain { op: &'static str, reason: String },

    #[error("temporal alignment error: source has {source_len} steps, target has {target_len}")]
    Alignment { source_len: usize, target_len: usize },

    #[error("invalid dataset spec: {0}")]
    Spec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite {term} at iteration {iteration} (epoch {epoch})")]
    NonFinite {
        term: &'static str,
        epoch: usize,
        iteration: usize,
    },

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("gradient check failed for {op}: coordinate {coordinate}, analytic {analytic:e}, numeric {numeric:e}")]
    GradCheck {
        op: String,
        coordinate: usize,
        analytic: f64,
        numeric: f64,
    },

    #[error("incompatible checkpoint and dataset: {0}")]
    Incompatible(String),

    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("unsupported {kind} format version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("{kind} checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum {
        kind: &'static str,
        stored: u32,
        computed: u32,
    },

    #[error("training failed for slots={slots}, seed={seed}: {source}")]
    Ablation {
        slots: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn domain(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Domain {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn format(kind: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            reason: reason.into(),
        }
    }
}
