//! Error type shared across the crate.
//!
//! Display strings start with the stable error name so callers (and the CLI
//! exit-code mapping) can match on it without parsing the full message.

use thiserror::Error;

/// Errors produced by panel ingestion, solvers, and inference routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("DuplicateCell: cell (i={i}, t={t}) appears more than once")]
    DuplicateCell { i: u64, t: u64 },

    #[error("MissingCell: cell (i={i}, t={t}) is absent from the input")]
    MissingCell { i: u64, t: u64 },

    #[error("NonNumericField: data row {row}: {detail}")]
    NonNumericField { row: usize, detail: String },

    #[error("UnbalancedPanel: row/column index sets are not rectangular ({detail})")]
    UnbalancedPanel { detail: String },

    #[error("TooFewClusters: need at least 2 rows and 2 columns, got N={n_rows}, T={n_cols}")]
    TooFewClusters { n_rows: usize, n_cols: usize },

    #[error("MissingCovariates: operation requires a panel with covariates")]
    MissingCovariates,

    #[error("SingularDesign: {detail}")]
    SingularDesign { detail: String },

    #[error("TauOutOfRange: tau must lie strictly in (0,1), got {tau}")]
    TauOutOfRange { tau: f64 },

    #[error("InvalidTuning: {detail}")]
    InvalidTuning { detail: String },

    #[error("NonFinite: {detail}")]
    NonFinite { detail: String },

    #[error("TooLarge: brute-force guard exceeded (NT={nt} > {max_nt} or d={d} > {max_d})")]
    TooLarge {
        nt: usize,
        max_nt: usize,
        d: usize,
        max_d: usize,
    },

    #[error("DegenerateSpacing: quantile spacing is {spacing} (must be positive); tau may be too extreme for this sample")]
    DegenerateSpacing { spacing: f64 },

    #[error("NonPositiveRho: spacing ratio {rho} is not positive, cannot take logarithm")]
    NonPositiveRho { rho: f64 },

    #[error("NonPositiveH: {count} observation(s) have non-positive tail scale, first at (i={i}, t={t}) with value {value}; check the declared tail type")]
    NonPositiveH {
        i: u64,
        t: u64,
        value: f64,
        count: usize,
    },

    #[error("SingularQH: design second-moment matrix is singular to rcond {rcond:e}")]
    SingularQH { rcond: f64 },

    #[error("Unsupported: {detail}")]
    Unsupported { detail: String },

    #[error("Io: {0}")]
    Io(#[from] std::io::Error),

    #[error("Csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable short name of the variant, for exit-code mapping and diagnostics.
    pub fn name(&self) -> &'static str {
        match self {
            Error::DuplicateCell { .. } => "DuplicateCell",
            Error::MissingCell { .. } => "MissingCell",
            Error::NonNumericField { .. } => "NonNumericField",
            Error::UnbalancedPanel { .. } => "UnbalancedPanel",
            Error::TooFewClusters { .. } => "TooFewClusters",
            Error::MissingCovariates => "MissingCovariates",
            Error::SingularDesign { .. } => "SingularDesign",
            Error::TauOutOfRange { .. } => "TauOutOfRange",
            Error::InvalidTuning { .. } => "InvalidTuning",
            Error::NonFinite { .. } => "NonFinite",
            Error::TooLarge { .. } => "TooLarge",
            Error::DegenerateSpacing { .. } => "DegenerateSpacing",
            Error::NonPositiveRho { .. } => "NonPositiveRho",
            Error::NonPositiveH { .. } => "NonPositiveH",
            Error::SingularQH { .. } => "SingularQH",
            Error::Unsupported { .. } => "Unsupported",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
