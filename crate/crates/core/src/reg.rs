//! Inference for linear extremal quantile regression under two-way clustering.
//!
//! Mirrors the unconditional machinery with vector scores. The variance of
//! the indicator score stacks row-cluster and column-cluster outer products
//! on top of the design Gram matrix:
//!
//! ```text
//! Sigma = (1/(tau N T)) sum_i v_i v_i' + (1/(tau N T)) sum_t w_t w_t' + (1/NT) sum X X'
//! v_i = sum_t (tau - 1[Y_it < X'beta_hat]) X_it,   w_t = sum_i (...) X_it
//! ```
//!
//! The tail scale may vary with the covariates; it is estimated pointwise by
//! the spacing ratio `h(x) = x'(beta_hat(m tau) - beta_hat(tau)) /
//! xbar'(beta_hat(m tau) - beta_hat(tau))` (identically 1 for thin tails) and
//! enters through the reweighted second-moment matrix
//! `Q_H = (1/NT) sum h(X_it)^{-1} X_it X_it'`. A confidence interval for the
//! linear functional x'beta(tau) uses the sandwich form
//! `x' Q_H^{-1} Sigma Q_H^{-1} x`, the spacing scale built from the mean
//! regressor, and the same extreme-value studentization factor as the
//! unconditional case.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{PanelData, TailType, TuningParams};
use crate::solver::{fit_linear_quantile_path, QuantileFit, SolverOptions};
use crate::uncond::{ev_factor, normal_quantile};

/// Confidence interval for one linear functional of the coefficient vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionalCi {
    pub x: Vec<f64>,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Regression tail inference output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegTailInference {
    pub tau: f64,
    pub beta_hat: Vec<f64>,
    pub xi_hat: f64,
    pub rho_hat: f64,
    /// Spacing scale built from the mean regressor (units 1/outcome).
    pub a_hat: f64,
    /// Two-way cluster score variance matrix, row-major d x d.
    pub sigma_hat: Vec<Vec<f64>>,
    /// Tail-scale reweighted second-moment matrix, row-major d x d.
    pub q_h_hat: Vec<Vec<f64>>,
    /// Estimated tail scale per cell, row-major N*T.
    pub h_values: Vec<f64>,
    /// Sample mean regressor.
    pub mu_x: Vec<f64>,
    pub tail_type: TailType,
    pub functionals: Vec<FunctionalCi>,
    pub m: f64,
    pub l: f64,
    pub alpha: f64,
    /// True when every internal quantile fit met the solver tolerance.
    pub converged: bool,
}

fn require_covariates(panel: &PanelData) -> Result<usize> {
    let d = panel.dim();
    if d == 0 {
        return Err(Error::MissingCovariates);
    }
    Ok(d)
}

/// Vector indicator score -(tau N T)^(-1/2) sum (tau - 1[Y_it < X'beta]) X_it.
pub fn score_vector(panel: &PanelData, beta: &[f64], tau: f64) -> Result<Vec<f64>> {
    let d = require_covariates(panel)?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::TauOutOfRange { tau });
    }
    assert_eq!(
        beta.len(),
        d,
        "coefficient length must match design dimension"
    );
    let nt = panel.n_cells() as f64;
    let mut acc = vec![0.0; d];
    for i in 0..panel.n_rows() {
        for t in 0..panel.n_cols() {
            let row = panel.x_row(i, t);
            let fitted: f64 = row.iter().zip(beta).map(|(x, b)| x * b).sum();
            let dval = tau - if panel.y(i, t) < fitted { 1.0 } else { 0.0 };
            for k in 0..d {
                acc[k] += dval * row[k];
            }
        }
    }
    let scale = -(tau * nt).sqrt().recip();
    for v in &mut acc {
        *v *= scale;
    }
    Ok(acc)
}

/// Two-way cluster variance matrix of the vector score at `beta_hat`.
pub fn sigma_hat_matrix(panel: &PanelData, beta_hat: &[f64], tau: f64) -> Result<DMatrix<f64>> {
    let d = require_covariates(panel)?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::TauOutOfRange { tau });
    }
    assert_eq!(beta_hat.len(), d);
    let n = panel.n_rows();
    let t_len = panel.n_cols();
    let scale = tau * (n * t_len) as f64;

    let mut sigma = DMatrix::zeros(d, d);
    let mut col_sums = vec![0.0; t_len * d];
    let mut row_sum = vec![0.0; d];
    for i in 0..n {
        row_sum.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..t_len {
            let row = panel.x_row(i, t);
            let fitted: f64 = row.iter().zip(beta_hat).map(|(x, b)| x * b).sum();
            let dval = tau - if panel.y(i, t) < fitted { 1.0 } else { 0.0 };
            for k in 0..d {
                let v = dval * row[k];
                row_sum[k] += v;
                col_sums[t * d + k] += v;
            }
        }
        for a in 0..d {
            for b in 0..d {
                sigma[(a, b)] += row_sum[a] * row_sum[b] / scale;
            }
        }
    }
    for t in 0..t_len {
        let w = &col_sums[t * d..(t + 1) * d];
        for a in 0..d {
            for b in 0..d {
                sigma[(a, b)] += w[a] * w[b] / scale;
            }
        }
    }
    let gram = panel.gram_matrix()?;
    Ok(sigma + gram)
}

fn fits_at(panel: &PanelData, levels: &[f64], opts: &SolverOptions) -> Result<Vec<QuantileFit>> {
    for &lv in levels {
        if !(lv > 0.0 && lv < 1.0) {
            return Err(Error::TauOutOfRange { tau: lv });
        }
    }
    fit_linear_quantile_path(panel, levels, opts)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn delta(hi: &[f64], lo: &[f64]) -> Vec<f64> {
    hi.iter().zip(lo).map(|(h, l)| h - l).collect()
}

/// Spacing ratio x'(beta_hat(m l tau) - beta_hat(l tau)) / xdot'(beta_hat(m tau) - beta_hat(tau)).
///
/// `l = 1` is allowed (the numerator then reuses the denominator spacings),
/// which is how pointwise tail scales are normalized.
pub fn rho_hat_x(
    panel: &PanelData,
    tau: f64,
    m: f64,
    l: f64,
    x: &[f64],
    x_dot: &[f64],
    opts: &SolverOptions,
) -> Result<f64> {
    let d = require_covariates(panel)?;
    assert_eq!(x.len(), d);
    assert_eq!(x_dot.len(), d);
    if !(m > 1.0) || l < 1.0 {
        return Err(Error::InvalidTuning {
            detail: format!("need m > 1 and l >= 1, got m={m}, l={l}"),
        });
    }
    let fits = fits_at(panel, &[tau, m * tau, l * tau, m * l * tau], opts)?;
    let denom = dot(x_dot, &delta(&fits[1].beta, &fits[0].beta));
    if denom == 0.0 {
        return Err(Error::DegenerateSpacing { spacing: denom });
    }
    let numer = dot(x, &delta(&fits[3].beta, &fits[2].beta));
    Ok(numer / denom)
}

/// Tail index from the mean-regressor spacing ratio. Returns (rho_hat, xi_hat).
pub fn tail_index_reg(
    panel: &PanelData,
    tau: f64,
    m: f64,
    l: f64,
    opts: &SolverOptions,
) -> Result<(f64, f64)> {
    require_covariates(panel)?;
    if !(m > 1.0) || !(l > 1.0) {
        return Err(Error::InvalidTuning {
            detail: format!("m and l must exceed 1, got m={m}, l={l}"),
        });
    }
    let fits = fits_at(panel, &[tau, m * tau, l * tau, m * l * tau], opts)?;
    let mu = panel.covariate_mean()?;
    tail_index_from_fits(&mu, &fits)
}

fn tail_index_from_fits(mu: &[f64], fits: &[QuantileFit]) -> Result<(f64, f64)> {
    let l = fits[2].tau / fits[0].tau;
    let denom = dot(mu, &delta(&fits[1].beta, &fits[0].beta));
    if denom <= 0.0 {
        return Err(Error::DegenerateSpacing { spacing: denom });
    }
    let rho = dot(mu, &delta(&fits[3].beta, &fits[2].beta)) / denom;
    if rho <= 0.0 {
        return Err(Error::NonPositiveRho { rho });
    }
    Ok((rho, -rho.ln() / l.ln()))
}

/// Pointwise tail scales and the reweighted second-moment matrix Q_H.
///
/// Thin tails (`Type1`) have constant scale, so `h = 1` and Q_H is the Gram
/// matrix. Heavy and bounded tails use the normalized spacing ratio at each
/// design point; any non-positive value means the declared tail type is
/// inconsistent with the data (or the design point extrapolates).
pub fn estimate_h_and_qh(
    panel: &PanelData,
    tau: f64,
    m: f64,
    tail_type: TailType,
    opts: &SolverOptions,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    require_covariates(panel)?;
    if !(m > 1.0) {
        return Err(Error::InvalidTuning {
            detail: format!("m must exceed 1, got {m}"),
        });
    }
    let fits = fits_at(panel, &[tau, m * tau], opts)?;
    let spacing = delta(&fits[1].beta, &fits[0].beta);
    let mu = panel.covariate_mean()?;
    h_and_qh_from_spacing(panel, &spacing, &mu, tail_type)
}

fn h_and_qh_from_spacing(
    panel: &PanelData,
    spacing: &[f64],
    mu: &[f64],
    tail_type: TailType,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let d = panel.dim();
    let nt = panel.n_cells();

    if tail_type == TailType::Type1 {
        return Ok((vec![1.0; nt], panel.gram_matrix()?));
    }

    let denom = dot(mu, spacing);
    if denom == 0.0 {
        return Err(Error::DegenerateSpacing { spacing: denom });
    }
    let mut h = vec![0.0; nt];
    let mut bad: Option<(u64, u64, f64)> = None;
    let mut bad_count = 0usize;
    for i in 0..panel.n_rows() {
        for t in 0..panel.n_cols() {
            let v = dot(panel.x_row(i, t), spacing) / denom;
            if v <= 0.0 {
                bad_count += 1;
                if bad.is_none() {
                    bad = Some((panel.row_labels()[i], panel.col_labels()[t], v));
                }
            }
            h[i * panel.n_cols() + t] = v;
        }
    }
    if let Some((i, t, value)) = bad {
        return Err(Error::NonPositiveH {
            i,
            t,
            value,
            count: bad_count,
        });
    }

    let mut qh = DMatrix::zeros(d, d);
    let mut cell = 0;
    for i in 0..panel.n_rows() {
        for t in 0..panel.n_cols() {
            let row = panel.x_row(i, t);
            let wgt = 1.0 / h[cell];
            for a in 0..d {
                for b in a..d {
                    qh[(a, b)] += wgt * row[a] * row[b];
                }
            }
            cell += 1;
        }
    }
    for a in 0..d {
        for b in 0..a {
            qh[(a, b)] = qh[(b, a)];
        }
    }
    qh /= nt as f64;
    Ok((h, qh))
}

/// Symmetric inverse with relative condition check and eigenvalue floor.
fn symmetric_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let max = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    let min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
    let rcond = if max > 0.0 { min / max } else { 0.0 };
    if rcond < 1e-12 {
        return Err(Error::SingularQH { rcond });
    }
    let floor = 1e-12 * m.trace().abs() / d as f64;
    let mut inv = DMatrix::zeros(d, d);
    for k in 0..d {
        let lambda = eig.eigenvalues[k].max(floor);
        let col = eig.eigenvectors.column(k);
        for a in 0..d {
            for b in 0..d {
                inv[(a, b)] += col[a] * col[b] / lambda;
            }
        }
    }
    Ok(inv)
}

/// Confidence interval for the linear functional x'beta(tau).
pub fn infer_functional(
    panel: &PanelData,
    tau: f64,
    tuning: &TuningParams,
    x: &[f64],
    opts: &SolverOptions,
) -> Result<(f64, f64, f64)> {
    let result = infer_reg(panel, tau, tuning, &[x.to_vec()], opts)?;
    let f = &result.functionals[0];
    Ok((f.point, f.ci_low, f.ci_high))
}

/// Full regression tail inference with confidence intervals for the requested
/// linear functionals.
pub fn infer_reg(
    panel: &PanelData,
    tau: f64,
    tuning: &TuningParams,
    functionals: &[Vec<f64>],
    opts: &SolverOptions,
) -> Result<RegTailInference> {
    let d = require_covariates(panel)?;
    tuning.validate_for_tau(tau)?;
    for x in functionals {
        assert_eq!(x.len(), d, "functional length must match design dimension");
    }

    let (m, l) = (tuning.m, tuning.l);
    let fits = fits_at(panel, &[tau, m * tau, l * tau, m * l * tau], opts)?;
    let converged = fits.iter().all(|f| f.converged);
    let beta_hat = fits[0].beta.clone();
    let mu = panel.covariate_mean()?;

    let spacing = delta(&fits[1].beta, &fits[0].beta);
    let mean_spacing = dot(&mu, &spacing);
    if mean_spacing <= 0.0 {
        return Err(Error::DegenerateSpacing {
            spacing: mean_spacing,
        });
    }
    let a_hat = (tau * panel.n_cells() as f64).sqrt() / mean_spacing;

    let (rho_hat, xi_hat) = tail_index_from_fits(&mu, &fits)?;
    let (h_values, qh) = h_and_qh_from_spacing(panel, &spacing, &mu, tuning.tail_type)?;
    let sigma = sigma_hat_matrix(panel, &beta_hat, tau)?;
    let qh_inv = symmetric_inverse(&qh)?;

    let ev = ev_factor(xi_hat, m).abs();
    let z = normal_quantile(1.0 - tuning.alpha / 2.0);

    // Manual d-loop quadratic form (no dispatched kernels): reported interval
    // endpoints must reproduce bit for bit across binaries.
    let mut cis = Vec::with_capacity(functionals.len());
    for xvec in functionals {
        let point = dot(xvec, &beta_hat);
        let mut v = vec![0.0; d];
        for a in 0..d {
            for b in 0..d {
                v[a] += qh_inv[(a, b)] * xvec[b];
            }
        }
        let mut quad = 0.0;
        for a in 0..d {
            for b in 0..d {
                quad += v[a] * sigma[(a, b)] * v[b];
            }
        }
        let half_width = z * ev * quad.max(0.0).sqrt() / a_hat;
        cis.push(FunctionalCi {
            x: xvec.clone(),
            point,
            ci_low: point - half_width,
            ci_high: point + half_width,
        });
    }

    Ok(RegTailInference {
        tau,
        beta_hat,
        xi_hat,
        rho_hat,
        a_hat,
        sigma_hat: matrix_rows(&sigma),
        q_h_hat: matrix_rows(&qh),
        h_values,
        mu_x: mu,
        tail_type: tuning.tail_type,
        functionals: cis,
        m,
        l,
        alpha: tuning.alpha,
        converged,
    })
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}
