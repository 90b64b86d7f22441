//! Inference for the unconditional extremal quantile under two-way clustering.
//!
//! The centered indicator sums are clustered along both panel dimensions, so
//! the variance estimator combines the squared row-cluster partial sums, the
//! squared column-cluster partial sums, and the unit contribution of the
//! idiosyncratic part:
//!
//! ```text
//! sigma2 = (1/(tau N T)) sum_i (sum_t D_it)^2
//!        + (1/(tau N T)) sum_t (sum_i D_it)^2  + 1,    D_it = tau - 1[Y_it < beta_hat]
//! ```
//!
//! The convergence rate is self-normalized by the quantile spacing scale
//! `a_hat = sqrt(tau N T) / (beta_hat(m tau) - beta_hat(tau))`, which avoids
//! density estimation, and the tail index is read off the spacing ratio
//! `rho = (beta_hat(m l tau) - beta_hat(l tau)) / (beta_hat(m tau) - beta_hat(tau))`
//! as `xi = -log(rho) / log(l)`. Confidence intervals studentize with
//! `xi / (m^(-xi) - 1)` times `sigma / a_hat`.
//!
//! Quantile levels near 1 are handled by reflecting the outcome and the level,
//! so a single lower-tail code path exists.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::panel::{PanelData, TuningParams};
use crate::solver::SortedPool;

/// Point estimate, tail quantities, and confidence interval for one level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailInference {
    pub tau: f64,
    pub beta_hat: f64,
    pub xi_hat: f64,
    pub rho_hat: f64,
    /// Quantile spacing scale (units 1/outcome).
    pub a_hat: f64,
    /// Two-way cluster variance of the normalized indicator score; at least 1.
    pub sigma2_hat: f64,
    /// Estimated variance of `beta_hat`.
    pub var_beta: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub m: f64,
    pub l: f64,
    pub alpha: f64,
}

/// Normalized indicator score -(tau N T)^(-1/2) * sum(tau - 1[Y_it < beta]).
pub fn score(panel: &PanelData, beta: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::TauOutOfRange { tau });
    }
    let nt = panel.n_cells() as f64;
    let below = panel.y_values().iter().filter(|&&y| y < beta).count() as f64;
    Ok(-(tau * nt - below) / (tau * nt).sqrt())
}

/// Two-way cluster variance estimator evaluated at `beta_hat`; always >= 1.
pub fn sigma2_hat(panel: &PanelData, beta_hat: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::TauOutOfRange { tau });
    }
    let n = panel.n_rows();
    let t = panel.n_cols();
    let scale = tau * (n * t) as f64;

    let mut col_sums = vec![0.0; t];
    let mut row_term = 0.0;
    for i in 0..n {
        let mut row_sum = 0.0;
        for tt in 0..t {
            let d = tau - if panel.y(i, tt) < beta_hat { 1.0 } else { 0.0 };
            row_sum += d;
            col_sums[tt] += d;
        }
        row_term += row_sum * row_sum;
    }
    let col_term: f64 = col_sums.iter().map(|c| c * c).sum();
    Ok(row_term / scale + col_term / scale + 1.0)
}

/// Spacing scale from a pre-sorted pool.
pub fn spacing_scale_from_pool(pool: &SortedPool, tau: f64, m: f64) -> Result<f64> {
    if !(m > 1.0) {
        return Err(Error::InvalidTuning {
            detail: format!("m must exceed 1, got {m}"),
        });
    }
    let lo = pool.quantile(tau)?;
    let hi = pool.quantile(m * tau)?;
    let spacing = hi - lo;
    if spacing <= 0.0 {
        return Err(Error::DegenerateSpacing { spacing });
    }
    Ok((tau * pool.len() as f64).sqrt() / spacing)
}

/// a_hat = sqrt(tau N T) / (beta_hat(m tau) - beta_hat(tau)).
pub fn spacing_scale(panel: &PanelData, tau: f64, m: f64) -> Result<f64> {
    spacing_scale_from_pool(&SortedPool::from_panel(panel)?, tau, m)
}

/// Spacing-ratio tail index from a pre-sorted pool. Returns (rho_hat, xi_hat).
pub fn tail_index_from_pool(pool: &SortedPool, tau: f64, m: f64, l: f64) -> Result<(f64, f64)> {
    if !(m > 1.0) || !(l > 1.0) {
        return Err(Error::InvalidTuning {
            detail: format!("m and l must exceed 1, got m={m}, l={l}"),
        });
    }
    let denom = pool.quantile(m * tau)? - pool.quantile(tau)?;
    if denom <= 0.0 {
        return Err(Error::DegenerateSpacing { spacing: denom });
    }
    let numer = pool.quantile(m * l * tau)? - pool.quantile(l * tau)?;
    let rho = numer / denom;
    if rho <= 0.0 {
        return Err(Error::NonPositiveRho { rho });
    }
    Ok((rho, -rho.ln() / l.ln()))
}

/// Tail index estimate (rho_hat, xi_hat) for the panel's pooled sample.
pub fn tail_index(panel: &PanelData, tau: f64, m: f64, l: f64) -> Result<(f64, f64)> {
    tail_index_from_pool(&SortedPool::from_panel(panel)?, tau, m, l)
}

/// Extreme-value studentization factor xi / (m^(-xi) - 1), with its
/// continuous extension -1/ln(m) at xi = 0.
pub fn ev_factor(xi: f64, m: f64) -> f64 {
    if xi.abs() < 1e-8 {
        -1.0 / m.ln()
    } else {
        xi / (m.powf(-xi) - 1.0)
    }
}

/// Standard normal quantile.
pub(crate) fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

/// Full lower-tail inference at level `tau`.
pub fn infer(panel: &PanelData, tau: f64, tuning: &TuningParams) -> Result<TailInference> {
    let pool = SortedPool::from_panel(panel)?;
    infer_from_pool(panel, &pool, tau, tuning)
}

/// As [`infer`], with the pooled sample already sorted (shared across a tau
/// grid by Monte Carlo drivers).
pub fn infer_from_pool(
    panel: &PanelData,
    pool: &SortedPool,
    tau: f64,
    tuning: &TuningParams,
) -> Result<TailInference> {
    tuning.validate_for_tau(tau)?;
    let beta_hat = pool.quantile(tau)?;
    let sigma2 = sigma2_hat(panel, beta_hat, tau)?;
    let a_hat = spacing_scale_from_pool(pool, tau, tuning.m)?;
    let (rho_hat, xi_hat) = tail_index_from_pool(pool, tau, tuning.m, tuning.l)?;

    let ev = ev_factor(xi_hat, tuning.m);
    let var_beta = ev * ev * sigma2 / (a_hat * a_hat);
    let z = normal_quantile(1.0 - tuning.alpha / 2.0);
    let half_width = z * var_beta.sqrt();

    Ok(TailInference {
        tau,
        beta_hat,
        xi_hat,
        rho_hat,
        a_hat,
        sigma2_hat: sigma2,
        var_beta,
        ci_low: beta_hat - half_width,
        ci_high: beta_hat + half_width,
        m: tuning.m,
        l: tuning.l,
        alpha: tuning.alpha,
    })
}

/// Upper-tail inference at level `tau` (near 1), by reflection: the result is
/// mapped back to the original outcome scale.
pub fn infer_upper(panel: &PanelData, tau: f64, tuning: &TuningParams) -> Result<TailInference> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::TauOutOfRange { tau });
    }
    let reflected = panel.reflected();
    let inner = infer(&reflected, 1.0 - tau, tuning)?;
    Ok(TailInference {
        tau,
        beta_hat: -inner.beta_hat,
        xi_hat: inner.xi_hat,
        rho_hat: inner.rho_hat,
        a_hat: inner.a_hat,
        sigma2_hat: inner.sigma2_hat,
        var_beta: inner.var_beta,
        ci_low: -inner.ci_high,
        ci_high: -inner.ci_low,
        m: inner.m,
        l: inner.l,
        alpha: inner.alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::pooled_quantile;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal_panel(seed: u64, n: usize, t: usize) -> PanelData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..n * t).map(|_| rng.sample(StandardNormal)).collect();
        PanelData::from_y(n, t, y).unwrap()
    }

    #[test]
    fn score_saturated_indicator_cases() {
        let p = PanelData::from_y(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // beta below all outcomes: every indicator is zero.
        assert_abs_diff_eq!(
            score(&p, 0.0, 0.5).unwrap(),
            -2.0f64.sqrt(),
            epsilon = 1e-15
        );
        // beta above all outcomes: every indicator is one.
        assert_abs_diff_eq!(
            score(&p, 10.0, 0.5).unwrap(),
            2.0f64.sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn score_at_estimate_obeys_subgradient_bound() {
        for seed in 0..10 {
            let p = normal_panel(seed, 6, 7);
            for tau in [0.1, 0.37, 0.5, 0.83] {
                let beta = pooled_quantile(&p, tau).unwrap().beta_scalar();
                let raw: f64 = p
                    .y_values()
                    .iter()
                    .map(|&y| tau - if y < beta { 1.0 } else { 0.0 })
                    .sum();
                let ties = p.y_values().iter().filter(|&&y| y == beta).count() as f64;
                assert!(
                    raw.abs() <= tau.max(1.0 - tau) * (ties + 1.0) + 1e-9,
                    "seed {seed} tau {tau}: raw {raw}, ties {ties}"
                );
            }
        }
    }

    #[test]
    fn sigma2_all_indicators_zero() {
        let p = PanelData::from_y(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(sigma2_hat(&p, 0.0, 0.5).unwrap(), 3.0);
    }

    #[test]
    fn sigma2_iid_matches_moment_calculation() {
        // Under iid sampling both cluster terms estimate 1 - tau, so the mean
        // of sigma2 over replications should sit near 3 - 2 tau.
        let tau = 0.05;
        let reps = 100;
        let mut total = 0.0;
        for seed in 0..reps {
            let p = normal_panel(1000 + seed, 200, 200);
            let beta = pooled_quantile(&p, tau).unwrap().beta_scalar();
            total += sigma2_hat(&p, beta, tau).unwrap();
        }
        let mean = total / reps as f64;
        assert!(
            (mean - (3.0 - 2.0 * tau)).abs() < 0.25,
            "mean sigma2 {mean}"
        );
    }

    #[test]
    fn sigma2_pure_row_clustering_matches_direct_formula() {
        // Y_it = alpha_i with two row groups; beta_hat the tau-quantile picks
        // out the low group, and the row partial sums are exactly computable.
        let n = 10;
        let t = 8;
        let tau = 0.2;
        let mut y = Vec::new();
        for i in 0..n {
            let level = if i < 2 { -5.0 } else { 5.0 };
            y.extend(std::iter::repeat(level).take(t));
        }
        let p = PanelData::from_y(n, t, y).unwrap();
        let beta = pooled_quantile(&p, tau).unwrap().beta_scalar();
        assert_eq!(beta, -5.0);

        // Strict inequality: cells equal to beta_hat do not count as below.
        // Row sums: every row contributes t*tau (no cell is strictly below).
        let d_row = t as f64 * tau;
        let expected_row_term: f64 = n as f64 * d_row * d_row / (tau * (n * t) as f64);
        let d_col = n as f64 * tau;
        let expected_col_term: f64 = t as f64 * d_col * d_col / (tau * (n * t) as f64);
        let expected = expected_row_term + expected_col_term + 1.0;
        assert_abs_diff_eq!(
            sigma2_hat(&p, beta, tau).unwrap(),
            expected,
            epsilon = 1e-12
        );
    }

    #[test]
    fn sigma2_invariant_under_strictly_increasing_transform() {
        let p = normal_panel(3, 12, 9);
        let tau = 0.15;
        let beta = pooled_quantile(&p, tau).unwrap().beta_scalar();
        let base = sigma2_hat(&p, beta, tau).unwrap();

        let transformed: Vec<f64> = p.y_values().iter().map(|&v| v.powi(3) + 5.0 * v).collect();
        let pt = PanelData::from_y(12, 9, transformed).unwrap();
        let beta_t = pooled_quantile(&pt, tau).unwrap().beta_scalar();
        assert_eq!(sigma2_hat(&pt, beta_t, tau).unwrap(), base);
    }

    #[test]
    fn spacing_scale_on_integer_grid() {
        let values: Vec<f64> = (1..=100).map(|k| k as f64).collect();
        let p = PanelData::from_y(10, 10, values).unwrap();
        let a = spacing_scale(&p, 0.05, 2.0).unwrap();
        assert_abs_diff_eq!(a, 5.0f64.sqrt() / 5.0, epsilon = 1e-12);
    }

    #[test]
    fn spacing_scale_degenerate_on_constant_panel() {
        let p = PanelData::from_y(3, 3, vec![2.0; 9]).unwrap();
        assert!(matches!(
            spacing_scale(&p, 0.1, 2.0),
            Err(Error::DegenerateSpacing { .. })
        ));
    }

    #[test]
    fn spacing_scale_inverse_scale_equivariance() {
        let p = normal_panel(8, 10, 10);
        let a1 = spacing_scale(&p, 0.1, 2.0).unwrap();
        let scaled: Vec<f64> = p.y_values().iter().map(|v| 4.0 * v).collect();
        let p2 = PanelData::from_y(10, 10, scaled).unwrap();
        let a2 = spacing_scale(&p2, 0.1, 2.0).unwrap();
        assert_abs_diff_eq!(a2, a1 / 4.0, epsilon = 1e-12 * a1);
    }

    /// Pooled sample whose k-th smallest value equals q(k/100) for a given
    /// quantile function, on a 10x10 panel.
    fn synthetic_quantile_panel(q: impl Fn(f64) -> f64) -> PanelData {
        let values: Vec<f64> = (1..=100).map(|k| q(k as f64 / 100.0)).collect();
        PanelData::from_y(10, 10, values).unwrap()
    }

    #[test]
    fn tail_index_equal_spacings_gives_zero() {
        // Logarithmic quantile function: both spacings equal ln(m), rho = 1.
        let p = synthetic_quantile_panel(|u| u.ln());
        let (rho, xi) = tail_index(&p, 0.05, 2.0, 2.0).unwrap();
        assert_abs_diff_eq!(rho, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(xi, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn tail_index_recovers_pareto_exponent_exactly() {
        let p = synthetic_quantile_panel(|u| -u.powf(-0.5));
        let (rho, xi) = tail_index(&p, 0.05, 2.0, 2.0).unwrap();
        assert_abs_diff_eq!(rho, 2.0f64.powf(-0.5), epsilon = 1e-12);
        assert_abs_diff_eq!(xi, 0.5, epsilon = 1e-10);
    }

    #[test]
    fn tail_index_uniform_lower_tail() {
        let p = synthetic_quantile_panel(|u| u);
        let (rho, xi) = tail_index(&p, 0.05, 2.0, 2.0).unwrap();
        assert_abs_diff_eq!(rho, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(xi, -1.0, epsilon = 1e-10);
    }

    #[test]
    fn tail_index_location_scale_invariance() {
        let p = normal_panel(17, 14, 11);
        let (rho, xi) = tail_index(&p, 0.08, 2.0, 2.0).unwrap();
        let transformed: Vec<f64> = p.y_values().iter().map(|v| 3.0 * v - 7.0).collect();
        let p2 = PanelData::from_y(14, 11, transformed).unwrap();
        let (rho2, xi2) = tail_index(&p2, 0.08, 2.0, 2.0).unwrap();
        assert_abs_diff_eq!(rho, rho2, epsilon = 1e-12);
        assert_abs_diff_eq!(xi, xi2, epsilon = 1e-12);
    }

    #[test]
    fn ev_factor_values() {
        assert_abs_diff_eq!(ev_factor(0.0, 2.0), -1.0 / 2.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(
            ev_factor(0.5, 2.0),
            0.5 / (2.0f64.powf(-0.5) - 1.0),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(ev_factor(-1.0, 2.0), -1.0, epsilon = 1e-12);
        // Continuity across the xi = 0 threshold.
        assert_abs_diff_eq!(ev_factor(1e-9, 2.0), ev_factor(0.0, 2.0), epsilon = 1e-6);
    }

    #[test]
    fn variance_composition_arithmetic() {
        // sigma2 = 3, a_hat = 10, xi = 0, m = 2.
        let var = ev_factor(0.0, 2.0).powi(2) * 3.0 / 100.0;
        assert_abs_diff_eq!(var, 3.0 / (2.0f64.ln().powi(2) * 100.0), epsilon = 1e-15);
        assert_abs_diff_eq!(var, 0.0624411, epsilon = 1e-6);
    }

    #[test]
    fn infer_composes_consistently() {
        let p = normal_panel(5, 40, 40);
        let tuning = TuningParams::default();
        let ti = infer(&p, 0.05, &tuning).unwrap();
        assert!(ti.ci_low <= ti.beta_hat && ti.beta_hat <= ti.ci_high);
        assert!(ti.sigma2_hat >= 1.0);
        assert!(ti.var_beta >= 0.0);
        let ev = ev_factor(ti.xi_hat, tuning.m);
        assert_eq!(ti.var_beta, ev * ev * ti.sigma2_hat / (ti.a_hat * ti.a_hat));
        assert_eq!(
            ti.beta_hat,
            pooled_quantile(&p, 0.05).unwrap().beta_scalar()
        );
    }

    #[test]
    fn infer_ci_location_scale_equivariance() {
        let p = normal_panel(6, 20, 25);
        let tuning = TuningParams::default();
        let base = infer(&p, 0.05, &tuning).unwrap();

        let (a, b) = (2.5, 3.0);
        let transformed: Vec<f64> = p.y_values().iter().map(|v| a * v + b).collect();
        let p2 = PanelData::from_y(20, 25, transformed).unwrap();
        let moved = infer(&p2, 0.05, &tuning).unwrap();

        assert_eq!(moved.beta_hat, a * base.beta_hat + b);
        assert_abs_diff_eq!(moved.ci_low, a * base.ci_low + b, epsilon = 1e-10);
        assert_abs_diff_eq!(moved.ci_high, a * base.ci_high + b, epsilon = 1e-10);
        assert_abs_diff_eq!(moved.xi_hat, base.xi_hat, epsilon = 1e-12);
        assert_eq!(moved.sigma2_hat, base.sigma2_hat);
    }

    #[test]
    fn upper_tail_is_reflection_of_lower() {
        let p = normal_panel(9, 15, 15);
        let tuning = TuningParams::default();
        let upper = infer_upper(&p, 0.95, &tuning).unwrap();

        let reflected =
            PanelData::from_y(15, 15, p.y_values().iter().map(|v| -v).collect()).unwrap();
        let lower = infer(&reflected, 0.05, &tuning).unwrap();
        assert_eq!(upper.beta_hat, -lower.beta_hat);
        assert_eq!(upper.ci_low, -lower.ci_high);
        assert_eq!(upper.ci_high, -lower.ci_low);
        assert!(upper.ci_low <= upper.beta_hat && upper.beta_hat <= upper.ci_high);
    }

    #[test]
    fn estimators_exchangeable_in_rows_and_columns() {
        let p = normal_panel(13, 9, 7);
        let tau = 0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut row_perm: Vec<usize> = (0..9).collect();
        let mut col_perm: Vec<usize> = (0..7).collect();
        row_perm.shuffle(&mut rng);
        col_perm.shuffle(&mut rng);
        let q = p.permuted(&row_perm, &col_perm);

        let b1 = pooled_quantile(&p, tau).unwrap().beta_scalar();
        let b2 = pooled_quantile(&q, tau).unwrap().beta_scalar();
        assert_eq!(b1, b2);

        let s1 = sigma2_hat(&p, b1, tau).unwrap();
        let s2 = sigma2_hat(&q, b2, tau).unwrap();
        assert_abs_diff_eq!(s1, s2, epsilon = 1e-12 * s1);

        let ti1 = tail_index(&p, tau, 2.0, 2.0).unwrap();
        let ti2 = tail_index(&q, tau, 2.0, 2.0).unwrap();
        assert_eq!(ti1, ti2);
    }
}
