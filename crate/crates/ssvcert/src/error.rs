use thiserror::Error;

/// Errors surfaced by the certification toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An instance exceeds a documented size cap. The message names the cap.
    #[error("size cap exceeded: {0}")]
    SizeCap(String),

    /// A parameter is outside its admissible range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A requested operation is unsupported (e.g. Hermite order above 64).
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A constraint system was decided infeasible within tolerance.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Numerical failure (non-convergence, overflow) with diagnostics.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Input/output failure when reading or writing datasets and reports.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file contents.
    #[error("parse error: {0}")]
    Parse(String),
}
