//! Crate-wide error type. Validation errors (bad input, bad config,
//! infeasible conditioning) are distinguished from runtime failures so the
//! CLI can map them to different exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent dataset content, reported with row context
    /// where it comes from a file.
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Configuration that fails validation before any work starts.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Fixing the requested coordinates contradicts the design, e.g. more
    /// treated units pinned than the design assigns in total.
    #[error("infeasible conditioning: {0}")]
    InfeasibleConditioning(String),

    /// Exact enumeration was requested over a support too large to list.
    #[error("support too large: {free} free units exceeds the enumeration cap of {cap}")]
    SupportTooLarge { free: usize, cap: usize },

    /// A selection claimed a subgroup whose treatments it had revealed.
    /// Always a bug in a selector (or a deliberately adversarial one); never
    /// recoverable.
    #[error("self-containedness audit failed: {0}")]
    SelectionAudit(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors the caller caused with bad input, as opposed to
    /// failures of the computation itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidData(_)
                | Error::InvalidConfig(_)
                | Error::InfeasibleConditioning(_)
                | Error::SupportTooLarge { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
