//! Error types shared across the library.

use thiserror::Error;

/// Library-wide result alias.
pub type Result<T> = std::result::Result<T, DfmError>;

/// Errors raised by the library.
///
/// Variants are grouped by failure class so callers (notably the CLI) can map
/// them onto exit codes: invalid configuration, bad data, or numerical aborts.
#[derive(Debug, Error)]
pub enum DfmError {
    /// Arguments violate a documented precondition (shape, range, flags).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Input is structurally degenerate (rank-deficient, zero column, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A matrix required to be SPD or invertible is not.
    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    /// A scalar argument is outside its admissible range.
    #[error("out of range: {0}")]
    RangeError(String),

    /// The requested operation does not support the given factor law.
    #[error("unsupported factor law: {0}")]
    UnsupportedLaw(String),

    /// All kernel weights underflowed; the posterior mean is undefined.
    #[error("numerical underflow: {0}")]
    NumericalUnderflow(String),

    /// Too few observations for the requested estimate.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A relative-error metric has a zero denominator.
    #[error("degenerate division: {0}")]
    DivisionDegenerate(String),

    /// The constraint set of an optimization problem is empty.
    #[error("infeasible constraints: {0}")]
    Infeasible(String),

    /// The tangency portfolio normalizer `1'S^-1 mu` vanished.
    #[error("degenerate tangency portfolio: {0}")]
    DegenerateTangency(String),

    /// A weights schedule and a panel do not line up.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// A numerical routine produced non-finite values and stopped.
    #[error("numerical abort: {0}")]
    NumericalAbort(String),

    /// Training hit a non-finite loss; carries diagnostics.
    #[error(
        "training aborted at epoch {epoch}, batch {batch}: non-finite loss \
         (|c|={c_norm:.3e}, |V|={v_norm:.3e}, |mlp|={mlp_norm:.3e})"
    )]
    TrainAbort {
        epoch: usize,
        batch: usize,
        c_norm: f64,
        v_norm: f64,
        mlp_norm: f64,
    },

    /// Malformed CSV input; carries the 1-based line number when known.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
