use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("unsupported schema version {found} (expected {expected})")]
    Schema { found: u64, expected: u64 },

    /// A profile or plan violates a structural invariant; `node` names the
    /// offending node id.
    #[error("invalid node `{node}`: {reason}")]
    Validation { node: String, reason: String },

    #[error("degenerate request: {0}")]
    Degenerate(String),

    #[error(
        "infeasible: stage {stage} needs {sched_peak} bytes against a capacity of {capacity} bytes"
    )]
    Infeasible {
        /// 1-based stage index of the most oversubscribed stage.
        stage: usize,
        sched_peak: u64,
        capacity: u64,
    },

    #[error("instance too large: {combinations} cut tuples exceed the limit of {limit}")]
    TooLarge { combinations: u128, limit: u128 },

    #[error("plan does not match graph: {0}")]
    PlanMismatch(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(node: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            node: node.into(),
            reason: reason.into(),
        }
    }
}
