//! Extremal quantile estimation and inference under two-way clustered
//! sampling.
//!
//! The crate estimates intermediate-order quantiles (tau small, with
//! tau*N*T large) of outcomes observed on a balanced N x T panel whose
//! dependence runs along both the row and the column dimension. It provides:
//!
//! - pinball-loss minimizers: exact pooled quantiles, an interior-point
//!   linear quantile regression, and a brute-force oracle ([`solver`]);
//! - two-way cluster variance estimators, spacing-based scale normalization,
//!   tail-index estimation, and extreme-value studentized confidence
//!   intervals for the pooled quantile ([`uncond`]) and for linear
//!   functionals of quantile-regression coefficients ([`reg`]);
//! - reproducible Monte Carlo coverage studies over the standard two-way
//!   designs ([`sim`]).

pub mod error;
pub mod panel;
pub mod reg;
pub mod sim;
pub mod solver;
pub mod uncond;

pub use error::{Error, Result};
pub use panel::{
    load_csv, load_csv_path, validate, PanelData, TailType, TuningParams, ValidationReport,
};
pub use reg::{FunctionalCi, RegTailInference};
pub use sim::{
    generate, run_coverage, true_quantile, CoverageStudy, CoverageTable, DesignFamily, OracleCache,
    SimDesign, StudyConfig, TrueQuantile,
};
pub use solver::{
    brute_force_fit, check_loss, fit_linear_quantile, fit_linear_quantile_path, pooled_quantile,
    QuantileFit, SolverOptions, SortedPool,
};
pub use uncond::{
    ev_factor, infer, infer_upper, sigma2_hat, spacing_scale, tail_index, TailInference,
};
