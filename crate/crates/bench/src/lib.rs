//! Shared fixtures for the benchmark suite.

use eqc_core::sim::{generate, DesignFamily, SimDesign};
use eqc_core::PanelData;

/// Standard additive two-way panel used across benchmarks.
pub fn additive_panel(n: usize, t: usize, seed: u64) -> PanelData {
    let design = SimDesign {
        family: DesignFamily::Additive,
        sigma_alpha: 1.0,
        sigma_gamma: 1.0,
        sigma_eps: 2.0,
        n,
        t,
        d: 0,
        xi_true: 0.0,
    };
    generate(&design, seed)
}

/// Regression panel with `d - 1` uniform covariates and unit slopes.
pub fn regression_panel(n: usize, t: usize, d: usize, seed: u64) -> PanelData {
    let design = SimDesign {
        family: DesignFamily::LocationRegression,
        sigma_alpha: 0.5,
        sigma_gamma: 0.5,
        sigma_eps: 1.0,
        n,
        t,
        d,
        xi_true: 0.0,
    };
    generate(&design, seed)
}
