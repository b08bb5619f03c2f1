use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on shapes, ranges or probability vectors was violated.
    #[error("domain error: {0}")]
    Domain(String),

    /// Similarity is undefined because an argument has no variance after centering.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("failed to ingest {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("capture is missing the {tap} tap of encoder {encoder}")]
    MissingTap { encoder: usize, tap: &'static str },

    #[error(
        "enumerating {count} paths exceeds the cap of {cap}; use the streaming path iterator instead"
    )]
    EnumerationTooLarge { count: u128, cap: u128 },

    #[error("no threshold in (0, 1] routes a fraction >= {lec} of inputs to the low effort")]
    InfeasibleLec { lec: f64 },

    #[error(
        "{memory} too small: tile needs {required_bits} bits, capacity is {capacity_bits} bits"
    )]
    Capacity {
        memory: &'static str,
        required_bits: u64,
        capacity_bits: u64,
    },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("GEMM of {volume} MACs exceeds the oracle cap of {cap}")]
    OracleCap { volume: u64, cap: u64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Whether this error was caused by bad user input (as opposed to an
    /// infeasible search or an I/O failure).
    pub fn is_invalid_input(&self) -> bool {
        matches!(
            self,
            Error::Domain(_)
                | Error::Degenerate(_)
                | Error::Ingestion { .. }
                | Error::MissingTap { .. }
                | Error::EnumerationTooLarge { .. }
                | Error::Capacity { .. }
                | Error::Config(_)
                | Error::OracleCap { .. }
        )
    }
}
