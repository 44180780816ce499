//! Error taxonomy shared by every estimator and the data layer.
//!
//! Variants are grouped by how a caller should react: `Config`/`Schema`/
//! `Parse`/`Dimension` mean the input must change, `Numeric`/`Divergence`/
//! `Truncation` mean the run failed in a way a retry (new seed, different
//! settings) may fix, and `Guard` means a deliberate refusal that requires an
//! explicit override.

use thiserror::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// CSV schema problems: missing header, header mismatch across studies,
    /// inconsistent column counts.
    #[error("schema error: {0}")]
    Schema(String),

    /// A cell failed to parse as a finite number.
    #[error("parse error in {file} at row {row}, column {column}: {detail}")]
    Parse {
        file: String,
        row: usize,
        column: String,
        detail: String,
    },

    /// Missing values are rejected outright; imputation is out of scope.
    #[error("missing value in {file} at row {row}, column {column}")]
    MissingValue {
        file: String,
        row: usize,
        column: String,
    },

    /// Incompatible shapes: empty study, K > P, covariate row mismatch, ...
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid run configuration (burn >= nrun, thin == 0, bad thresholds).
    #[error("config error: {0}")]
    Config(String),

    /// Numerical failure that survived the built-in safeguards
    /// (factorization jitter retries, singular-draw rejections, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An optimizer objective decreased persistently; indicates a bug or a
    /// pathological input rather than ordinary Monte Carlo noise.
    #[error("divergence: {0}")]
    Divergence(String),

    /// Adaptive column pruning removed every factor.
    #[error("truncation error: {0}")]
    Truncation(String),

    /// A deliberate resource guard. Callers must opt in to proceed.
    #[error("guard refusal: {0}")]
    Guard(String),

    /// Checkpoint file malformed or from an incompatible version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code the CLI maps this error onto.
    ///
    /// 2 = configuration/input problems, 3 = numerical failures,
    /// 4 = guard refusals.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_)
            | Error::Parse { .. }
            | Error::MissingValue { .. }
            | Error::Dimension(_)
            | Error::Config(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Checkpoint(_) => 2,
            Error::Numeric(_) | Error::Divergence(_) | Error::Truncation(_) => 3,
            Error::Guard(_) => 4,
        }
    }
}
