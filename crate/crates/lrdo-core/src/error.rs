// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad dimensions: {0}")]
    BadDimensions(String),
    #[error("matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("iterative factorization did not converge")]
    ConvergenceFailure,
    #[error("invalid generator mode: {0}")]
    BadMode(String),
    #[error("cluster means are not pairwise orthogonal (|<mu_{i}, mu_{j}>| = {inner:e})")]
    NonOrthogonalMeans { i: usize, j: usize, inner: f64 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("requested rank {r} exceeds min(d, N) = {limit}")]
    RankTooLarge { r: usize, limit: usize },
    #[error("rank gap violated: need r < |d - N|, got r = {r}, d = {d}, N = {n}")]
    RankGapViolation { r: usize, d: usize, n: usize },
    #[error("aspect ratio c = {0} is at the interpolation peak c = 1")]
    AtPeak(f64),
    #[error("argument outside the domain: {0}")]
    Domain(String),
    #[error("matrix is not positive semi-definite (smallest eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("integrand is singular on the support: {0}")]
    SingularIntegrand(String),
    #[error("quantity not defined in this regime: {0}")]
    RegimeMismatch(String),
    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("rows do not span both regimes: {0}")]
    InsufficientSpan(String),
    #[error("linear solve failed: {0}")]
    SolveFailure(String),
    #[error("{failed} of {trials} trials failed, above the 1% limit")]
    TooManyFailures { failed: usize, trials: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse classification used to map errors onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad input shapes, parameters or files.
    Input,
    /// Parameters outside the region where a formula is defined.
    Domain,
    /// Runtime numerical breakdown.
    Numerical,
    /// Operating-system level failure.
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::RankGapViolation { .. }
            | Error::AtPeak(_)
            | Error::Domain(_)
            | Error::NotPsd(_)
            | Error::SingularIntegrand(_)
            | Error::RegimeMismatch(_)
            | Error::InsufficientSpan(_)
            | Error::InsufficientPoints { .. }
            | Error::NonOrthogonalMeans { .. }
            | Error::RankTooLarge { .. } => ErrorClass::Domain,
            Error::ConvergenceFailure
            | Error::SolveFailure(_)
            | Error::TooManyFailures { .. }
            | Error::NonFinite { .. } => ErrorClass::Numerical,
            Error::Io(_) => ErrorClass::Io,
            Error::DimensionMismatch(_)
            | Error::ShapeMismatch(_)
            | Error::BadDimensions(_)
            | Error::BadMode(_)
            | Error::Parse(_) => ErrorClass::Input,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
