//! Error type shared by every module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user input: unknown problem, invalid grid, value outside U, ...
    /// Maps to exit code 2 in the CLI.
    #[error("configuration error: {0}")]
    Config(String),

    /// An analytic partial disagrees with central finite differences.
    #[error("gradient mismatch in {partial}: max relative error {max_rel:.3e} exceeds {tol:.1e}")]
    GradientMismatch {
        partial: String,
        max_rel: f64,
        tol: f64,
    },

    /// Linear-algebra failure; carries a rough condition estimate.
    #[error("numerical error in {context}: condition estimate {cond:.3e}")]
    Numerical { context: String, cond: f64 },

    /// Non-finite value produced by a solver sweep.
    #[error("divergence: non-finite value at time index {step}, path {path}")]
    Divergence { step: usize, path: usize },

    /// The brute-force oracle's preconditions do not hold for this problem.
    #[error("oracle inapplicable: {0}")]
    OracleInapplicable(String),

    /// Enumeration would exceed the candidate budget.
    #[error("enumeration budget exceeded: {0}")]
    Budget(String),

    /// The augmented adjoint's last component drifted away from -1.
    #[error("reduction invariant violated: {0}")]
    ReductionInvariant(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// CLI exit code bucket: anything that is not a check verdict is 2.
    pub fn exit_code(&self) -> i32 {
        2
    }
}
