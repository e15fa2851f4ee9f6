//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("rank-deficient mapping: rank {rank} < required {required}")]
    RankDeficient { rank: usize, required: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("state diverged at t = {t:.4} s (|{component}| = {magnitude:.3e} exceeds bound {bound:.1e})")]
    Diverged {
        t: f64,
        component: &'static str,
        magnitude: f64,
        bound: f64,
    },

    /// Divergence inside an experiment; completed trials are kept.
    #[error("experiment diverged in session {session}, trial {trial}: {source}")]
    ExperimentDiverged {
        session: usize,
        trial: usize,
        #[source]
        source: Box<Error>,
        records: Vec<crate::protocol::TrialRecord>,
    },

    #[error("true mapping has zero norm; FME undefined")]
    ZeroTrueMapping,

    #[error("empty metric group: {0}")]
    EmptyGroup(String),

    #[error("curve fit diverged: {0}")]
    FitDiverged(String),

    #[error("PE window of {window:.3} s exceeds half the signal duration {duration:.3} s")]
    WindowTooLong { window: f64, duration: f64 },

    #[error("record schema mismatch: {0}")]
    SchemaVersionMismatch(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
