//! Minimizers of the pinball (check) loss.
//!
//! Three routes to the same objective:
//! - [`pooled_quantile`] solves the scalar problem exactly via order-statistic
//!   selection;
//! - [`fit_linear_quantile`] solves the linear quantile regression by a
//!   primal-dual interior-point method with Mehrotra predictor-corrector
//!   steps on the equivalent linear program;
//! - [`brute_force_fit`] enumerates basic solutions on small instances and
//!   serves as the verification oracle for the interior-point path.
//!
//! The scalar minimizer uses the lower endpoint of the argmin interval, i.e.
//! the k-th smallest pooled value with k = ceil(tau * N * T).

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{design_matrix, PanelData};

/// Result of a check-loss minimization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantileFit {
    pub tau: f64,
    /// Coefficient vector; length 1 for the pooled (unconditional) problem.
    pub beta: Vec<f64>,
    /// Check loss evaluated at `beta`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl QuantileFit {
    /// Scalar coefficient; panics if the fit is multivariate.
    pub fn beta_scalar(&self) -> f64 {
        assert_eq!(self.beta.len(), 1, "fit is not scalar");
        self.beta[0]
    }
}

/// Options for the interior-point solver.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Relative duality-gap tolerance: stop when gap <= tol * (1 + |objective|).
    pub tol: f64,
    pub max_iter: usize,
    /// Fraction of the maximal feasible step taken each iteration.
    pub step_scale: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            max_iter: 200,
            step_scale: 0.99995,
        }
    }
}

/// Sum of the check loss rho_tau(u) = u * (tau - 1{u < 0}) over residuals.
pub fn check_loss(residuals: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::TauOutOfRange { tau });
    }
    let mut total = 0.0;
    for &u in residuals {
        if u.is_nan() {
            return Err(Error::NonFinite {
                detail: "residual is NaN".into(),
            });
        }
        total += u * (tau - if u < 0.0 { 1.0 } else { 0.0 });
    }
    Ok(total)
}

/// Zero-based index of the k-th smallest pooled value, k = ceil(tau * nt).
///
/// The product is nudged by a relative epsilon before taking the ceiling so
/// that quantile levels intended to hit an integer rank exactly (e.g. 0.05 on
/// 40000 cells) are not pushed one rank up by float representation error.
pub fn order_index(tau: f64, nt: usize) -> Result<usize> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::TauOutOfRange { tau });
    }
    let p = tau * nt as f64;
    let eps = 1e-12 * p.max(1.0);
    let k = (p - eps).ceil().max(1.0) as usize;
    Ok(k.min(nt) - 1)
}

/// Pooled sample sorted once, for repeated quantile lookups on a tau grid.
#[derive(Debug, Clone)]
pub struct SortedPool {
    values: Vec<f64>,
}

impl SortedPool {
    pub fn from_panel(panel: &PanelData) -> Result<Self> {
        Self::from_values(panel.y_values().to_vec())
    }

    pub fn from_values(mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite {
                detail: "pooled sample contains NaN".into(),
            });
        }
        values.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(SortedPool { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Lower-endpoint empirical quantile at level `tau`.
    pub fn quantile(&self, tau: f64) -> Result<f64> {
        Ok(self.values[order_index(tau, self.values.len())?])
    }
}

/// Exact scalar quantile of the pooled panel via selection.
pub fn pooled_quantile(panel: &PanelData, tau: f64) -> Result<QuantileFit> {
    let mut values = panel.y_values().to_vec();
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            detail: "pooled sample contains NaN".into(),
        });
    }
    let idx = order_index(tau, values.len())?;
    let (_, pivot, _) = values.select_nth_unstable_by(idx, |a, b| a.partial_cmp(b).unwrap());
    let beta = *pivot;
    let residuals: Vec<f64> = panel.y_values().iter().map(|y| y - beta).collect();
    let objective = check_loss(&residuals, tau)?;
    Ok(QuantileFit {
        tau,
        beta: vec![beta],
        objective,
        iterations: 0,
        converged: true,
    })
}

/// Warm-start state carried along a tau grid.
struct WarmStart {
    tau: f64,
    a: Vec<f64>,
    phi: DVector<f64>,
}

/// Fit the linear quantile regression at level `tau`.
///
/// Solves min over beta of the pooled check loss through the bounded-variable
/// dual LP  max y'a  s.t.  X'a = (1-tau) X'1,  a in [0,1]^n, whose equality
/// multipliers recover -beta. A panel whose only covariate is the intercept
/// reduces exactly to [`pooled_quantile`].
pub fn fit_linear_quantile(
    panel: &PanelData,
    tau: f64,
    opts: &SolverOptions,
) -> Result<QuantileFit> {
    if panel.dim() == 0 {
        return Err(Error::MissingCovariates);
    }
    if panel.dim() == 1 {
        return pooled_quantile(panel, tau);
    }
    let (x, y) = design_matrix(panel)?;
    Ok(interior_point(&x, &y, tau, opts, None)?.fit)
}

/// Fit at several quantile levels, warm-starting each fit from the previous
/// level on the ascending grid. Results are returned in input order.
pub fn fit_linear_quantile_path(
    panel: &PanelData,
    taus: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<QuantileFit>> {
    if panel.dim() == 0 {
        return Err(Error::MissingCovariates);
    }
    if panel.dim() == 1 {
        return taus
            .iter()
            .map(|&tau| pooled_quantile(panel, tau))
            .collect();
    }
    let (x, y) = design_matrix(panel)?;

    let mut order: Vec<usize> = (0..taus.len()).collect();
    order.sort_by(|&a, &b| taus[a].partial_cmp(&taus[b]).unwrap());

    let mut fits: Vec<Option<QuantileFit>> = vec![None; taus.len()];
    let mut warm: Option<WarmStart> = None;
    for &slot in &order {
        let tau = taus[slot];
        if let Some(prev) = order
            .iter()
            .take_while(|&&s| s != slot)
            .find(|&&s| taus[s] == tau)
        {
            fits[slot] = fits[*prev].clone();
            continue;
        }
        let out = interior_point(&x, &y, tau, opts, warm.as_ref())?;
        warm = Some(WarmStart {
            tau,
            a: out.a,
            phi: out.phi,
        });
        fits[slot] = Some(out.fit);
    }
    Ok(fits.into_iter().map(|f| f.unwrap()).collect())
}

/// Interior-point result plus the terminal state used for warm starts.
struct IpmOutcome {
    fit: QuantileFit,
    a: Vec<f64>,
    phi: DVector<f64>,
}

fn interior_point(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    tau: f64,
    opts: &SolverOptions,
    warm: Option<&WarmStart>,
) -> Result<IpmOutcome> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::TauOutOfRange { tau });
    }
    let n = x.nrows();
    let d = x.ncols();
    if n < d {
        return Err(Error::SingularDesign {
            detail: format!("{n} observations for {d} coefficients"),
        });
    }

    // rhs of the equality constraint X'a = (1-tau) X'1.
    let mut rhs = DVector::zeros(d);
    for i in 0..n {
        for k in 0..d {
            rhs[k] += (1.0 - tau) * x[(i, k)];
        }
    }
    let rhs_scale = 1.0 + rhs.amax();
    let c = -y.clone();

    // Primal start: a = (1-tau) 1 is feasible; a warm start shifts the
    // previous solution by the change in tau (which preserves the equality
    // constraint) and clamps back into the open box.
    let mut a: Vec<f64> = match warm {
        Some(w) => {
            let shift = w.tau - tau;
            w.a.iter()
                .map(|&v| (v + shift).clamp(1e-4, 1.0 - 1e-4))
                .collect()
        }
        None => vec![1.0 - tau; n],
    };
    let mut s: Vec<f64> = a.iter().map(|&v| 1.0 - v).collect();

    // Dual start: least-squares multipliers, residual split into z - w.
    let mut xtx = DMatrix::zeros(d, d);
    let mut xtc = DVector::zeros(d);
    for i in 0..n {
        for a_ix in 0..d {
            xtc[a_ix] += x[(i, a_ix)] * c[i];
            for b_ix in a_ix..d {
                xtx[(a_ix, b_ix)] += x[(i, a_ix)] * x[(i, b_ix)];
            }
        }
    }
    for a_ix in 0..d {
        for b_ix in 0..a_ix {
            xtx[(a_ix, b_ix)] = xtx[(b_ix, a_ix)];
        }
    }
    let chol = Cholesky::new(xtx).ok_or_else(|| Error::SingularDesign {
        detail: "X'X is not positive definite".into(),
    })?;
    let mut phi: DVector<f64> = match warm {
        Some(w) => w.phi.clone(),
        None => chol.solve(&xtc),
    };
    let mut r_dual: Vec<f64> = (0..n)
        .map(|i| {
            let xphi: f64 = (0..d).map(|k| x[(i, k)] * phi[k]).sum();
            c[i] - xphi
        })
        .collect();
    let pad = 1e-4 * (1.0 + r_dual.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let mut z: Vec<f64> = r_dual.iter().map(|&r| r.max(0.0) + pad).collect();
    let mut w: Vec<f64> = r_dual.iter().map(|&r| (-r).max(0.0) + pad).collect();

    let mut beta = -phi.clone();
    let mut objective = check_objective(x, y, &beta, tau);
    let mut converged = false;
    let mut iterations = 0;

    let mut dmat = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut da = vec![0.0; n];
    let mut ds = vec![0.0; n];
    let mut dz = vec![0.0; n];
    let mut dw = vec![0.0; n];
    let mut da_aff = vec![0.0; n];
    let mut ds_aff = vec![0.0; n];
    let mut dz_aff = vec![0.0; n];
    let mut dw_aff = vec![0.0; n];

    for it in 1..=opts.max_iter {
        iterations = it;

        // Residuals. The dual and box residuals stay at roundoff level by
        // construction; the primal residual is nonzero after a clamped warm
        // start and contracts geometrically.
        let mut r_p = rhs.clone();
        for i in 0..n {
            for k in 0..d {
                r_p[k] -= x[(i, k)] * a[i];
            }
        }
        for i in 0..n {
            let xphi: f64 = (0..d).map(|k| x[(i, k)] * phi[k]).sum();
            r_dual[i] = c[i] - xphi - z[i] + w[i];
        }

        let gap: f64 = (0..n).map(|i| a[i] * z[i] + s[i] * w[i]).sum();
        let primal_inf = r_p.amax() / rhs_scale;
        if gap <= opts.tol * (1.0 + objective.abs()) && primal_inf <= 100.0 * opts.tol {
            converged = true;
            iterations = it - 1;
            break;
        }

        for i in 0..n {
            dmat[i] = 1.0 / (z[i] / a[i] + w[i] / s[i]);
        }

        // Normal-equations matrix X' D X, factored once per iteration.
        let mut m = DMatrix::zeros(d, d);
        for i in 0..n {
            let di = dmat[i];
            for r in 0..d {
                let xr = x[(i, r)] * di;
                for cix in r..d {
                    m[(r, cix)] += xr * x[(i, cix)];
                }
            }
        }
        for r in 0..d {
            for cix in 0..r {
                m[(r, cix)] = m[(cix, r)];
            }
        }
        let chol_m = match cholesky_with_ridge(m) {
            Some(c) => c,
            None => break,
        };

        // Affine (predictor) direction.
        for i in 0..n {
            q[i] = -z[i] + w[i];
        }
        let dphi_aff = solve_direction(&chol_m, x, &r_p, &dmat, &q, &r_dual);
        apply_direction(x, &dphi_aff, &dmat, &q, &r_dual, &mut da_aff);
        for i in 0..n {
            ds_aff[i] = -da_aff[i];
            dz_aff[i] = -z[i] - z[i] / a[i] * da_aff[i];
            dw_aff[i] = -w[i] - w[i] / s[i] * ds_aff[i];
        }
        let ap_aff = step_length(&a, &da_aff, &s, &ds_aff, opts.step_scale);
        let ad_aff = step_length(&z, &dz_aff, &w, &dw_aff, opts.step_scale);

        let gap_aff: f64 = (0..n)
            .map(|i| {
                (a[i] + ap_aff * da_aff[i]) * (z[i] + ad_aff * dz_aff[i])
                    + (s[i] + ap_aff * ds_aff[i]) * (w[i] + ad_aff * dw_aff[i])
            })
            .sum();
        let sigma = (gap_aff / gap).clamp(0.0, 1.0).powi(3);
        let mu = sigma * gap / (2.0 * n as f64);

        // Corrector direction with Mehrotra second-order terms.
        for i in 0..n {
            q[i] = mu / a[i] - z[i] - da_aff[i] * dz_aff[i] / a[i] - mu / s[i]
                + w[i]
                + ds_aff[i] * dw_aff[i] / s[i];
        }
        let dphi = solve_direction(&chol_m, x, &r_p, &dmat, &q, &r_dual);
        apply_direction(x, &dphi, &dmat, &q, &r_dual, &mut da);
        for i in 0..n {
            ds[i] = -da[i];
            dz[i] = mu / a[i] - z[i] - z[i] / a[i] * da[i] - da_aff[i] * dz_aff[i] / a[i];
            dw[i] = mu / s[i] - w[i] - w[i] / s[i] * ds[i] - ds_aff[i] * dw_aff[i] / s[i];
        }

        let ap = step_length(&a, &da, &s, &ds, opts.step_scale);
        let ad = step_length(&z, &dz, &w, &dw, opts.step_scale);

        for i in 0..n {
            a[i] += ap * da[i];
            s[i] += ap * ds[i];
            z[i] += ad * dz[i];
            w[i] += ad * dw[i];
        }
        phi.axpy(ad, &dphi, 1.0);

        beta = -phi.clone();
        objective = check_objective(x, y, &beta, tau);

        if !objective.is_finite() || a.iter().any(|&v| !(v > 0.0)) || z.iter().any(|&v| !(v > 0.0))
        {
            break;
        }
    }

    Ok(IpmOutcome {
        fit: QuantileFit {
            tau,
            beta: beta.iter().cloned().collect(),
            objective,
            iterations,
            converged,
        },
        a,
        phi,
    })
}

// Plain accumulation loops, not matrix products: reported values must be
// reproducible bit for bit across separately compiled binaries, so nothing
// here may go through dispatched kernels.
fn check_objective(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, tau: f64) -> f64 {
    let d = x.ncols();
    let mut total = 0.0;
    for i in 0..y.len() {
        let fitted: f64 = (0..d).map(|k| x[(i, k)] * beta[k]).sum();
        let u = y[i] - fitted;
        total += u * (tau - if u < 0.0 { 1.0 } else { 0.0 });
    }
    total
}

fn cholesky_with_ridge(mut m: DMatrix<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    let d = m.nrows();
    let mut ridge = 0.0;
    for _ in 0..4 {
        if let Some(c) = Cholesky::new(m.clone()) {
            return Some(c);
        }
        ridge = if ridge == 0.0 {
            1e-12 * m.trace() / d as f64
        } else {
            ridge * 100.0
        };
        for k in 0..d {
            m[(k, k)] += ridge;
        }
    }
    None
}

/// Solve X' D X dphi = r_p + X' D (r_dual - q).
fn solve_direction(
    chol: &Cholesky<f64, nalgebra::Dyn>,
    x: &DMatrix<f64>,
    r_p: &DVector<f64>,
    dmat: &[f64],
    q: &[f64],
    r_dual: &[f64],
) -> DVector<f64> {
    let d = x.ncols();
    let n = x.nrows();
    let mut rhs = r_p.clone();
    for i in 0..n {
        let v = dmat[i] * (r_dual[i] - q[i]);
        for k in 0..d {
            rhs[k] += x[(i, k)] * v;
        }
    }
    chol.solve(&rhs)
}

/// da = D (X dphi + q - r_dual).
fn apply_direction(
    x: &DMatrix<f64>,
    dphi: &DVector<f64>,
    dmat: &[f64],
    q: &[f64],
    r_dual: &[f64],
    da: &mut [f64],
) {
    let d = x.ncols();
    for i in 0..x.nrows() {
        let xd: f64 = (0..d).map(|k| x[(i, k)] * dphi[k]).sum();
        da[i] = dmat[i] * (xd + q[i] - r_dual[i]);
    }
}

/// Largest step in (0, 1] keeping both variable blocks positive, scaled back.
fn step_length(a: &[f64], da: &[f64], b: &[f64], db: &[f64], scale: f64) -> f64 {
    let mut alpha = 1.0f64 / scale;
    for i in 0..a.len() {
        if da[i] < 0.0 {
            alpha = alpha.min(-a[i] / da[i]);
        }
        if db[i] < 0.0 {
            alpha = alpha.min(-b[i] / db[i]);
        }
    }
    (alpha * scale).min(1.0)
}

/// Exhaustive check-loss minimization over all interpolating bases.
///
/// Every basic solution of the quantile-regression LP interpolates d data
/// points, so scanning all nonsingular d-subsets attains the optimum. Guarded
/// to small instances; intended as a test oracle.
pub fn brute_force_fit(panel: &PanelData, tau: f64) -> Result<QuantileFit> {
    const MAX_NT: usize = 200;
    const MAX_D: usize = 3;
    let d = panel.dim();
    if d == 0 {
        return Err(Error::MissingCovariates);
    }
    let nt = panel.n_cells();
    if nt > MAX_NT || d > MAX_D {
        return Err(Error::TooLarge {
            nt,
            max_nt: MAX_NT,
            d,
            max_d: MAX_D,
        });
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::TauOutOfRange { tau });
    }
    let (x, y) = design_matrix(panel)?;
    let n = x.nrows();

    if d == 1 {
        // Intercept-only: candidates are the observations themselves, scanned
        // in ascending order so ties resolve to the lower endpoint.
        let mut values: Vec<f64> = (0..n).map(|i| y[i]).collect();
        values.sort_unstable_by(|p, q| p.partial_cmp(q).unwrap());
        let mut best: Option<(f64, f64)> = None;
        for &candidate in &values {
            let residuals: Vec<f64> = (0..n).map(|i| y[i] - candidate).collect();
            let obj = check_loss(&residuals, tau)?;
            if best.map_or(true, |(bo, _)| obj < bo) {
                best = Some((obj, candidate));
            }
        }
        let (objective, beta) = best.ok_or(Error::SingularDesign {
            detail: "no candidate solution".into(),
        })?;
        return Ok(QuantileFit {
            tau,
            beta: vec![beta],
            objective,
            iterations: 0,
            converged: true,
        });
    }

    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut indices = vec![0usize; d];
    for_each_combination(n, d, &mut indices, 0, 0, &mut |subset: &[usize]| {
        let mut xs = DMatrix::zeros(d, d);
        let mut ys = DVector::zeros(d);
        for (r, &i) in subset.iter().enumerate() {
            for k in 0..d {
                xs[(r, k)] = x[(i, k)];
            }
            ys[r] = y[i];
        }
        let y_scale = 1.0 + ys.amax();
        let lu = xs.clone().lu();
        let Some(beta) = lu.solve(&ys) else { return };
        // Reject ill-conditioned subsets via the interpolation residual.
        let resid = (&xs * &beta - &ys).amax();
        if !resid.is_finite() || resid > 1e-8 * y_scale {
            return;
        }
        let fitted = &x * &beta;
        let mut obj = 0.0;
        for i in 0..n {
            let u = y[i] - fitted[i];
            obj += u * (tau - if u < 0.0 { 1.0 } else { 0.0 });
        }
        if obj.is_finite() && best.as_ref().map_or(true, |(bo, _)| obj < *bo) {
            best = Some((obj, beta));
        }
    });

    let (objective, beta) = best.ok_or(Error::SingularDesign {
        detail: "every d-subset of the design is singular".into(),
    })?;
    Ok(QuantileFit {
        tau,
        beta: beta.iter().cloned().collect(),
        objective,
        iterations: 0,
        converged: true,
    })
}

fn for_each_combination(
    n: usize,
    d: usize,
    scratch: &mut Vec<usize>,
    depth: usize,
    start: usize,
    f: &mut impl FnMut(&[usize]),
) {
    if depth == d {
        f(scratch);
        return;
    }
    for i in start..n {
        scratch[depth] = i;
        for_each_combination(n, d, scratch, depth + 1, i + 1, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn panel_from(values: &[f64], n: usize, t: usize) -> PanelData {
        PanelData::from_y(n, t, values.to_vec()).unwrap()
    }

    fn random_covariate_panel(seed: u64, n: usize, t: usize, d: usize) -> PanelData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = n * t;
        let mut x = Vec::with_capacity(cells * d);
        let mut y = Vec::with_capacity(cells);
        for _ in 0..cells {
            x.push(1.0);
            let mut dot = 0.5;
            for k in 1..d {
                let v: f64 = rng.gen_range(-1.0..1.0);
                x.push(v);
                dot += v * (k as f64);
            }
            y.push(dot + rng.gen_range(-2.0..2.0));
        }
        PanelData::with_covariates(n, t, y, d, x).unwrap()
    }

    #[test]
    fn check_loss_examples() {
        assert_eq!(check_loss(&[1.0, -1.0], 0.5).unwrap(), 1.0);
        assert_eq!(check_loss(&[-1.0], 0.05).unwrap(), 0.95);
        assert_eq!(check_loss(&[2.0, -3.0], 0.25).unwrap(), 2.75);
    }

    #[test]
    fn check_loss_rejects_nan_and_bad_tau() {
        assert!(matches!(
            check_loss(&[f64::NAN], 0.5),
            Err(Error::NonFinite { .. })
        ));
        assert!(matches!(
            check_loss(&[1.0], 0.0),
            Err(Error::TauOutOfRange { .. })
        ));
        assert!(matches!(
            check_loss(&[1.0], 1.0),
            Err(Error::TauOutOfRange { .. })
        ));
    }

    #[test]
    fn pooled_median_of_odd_sample() {
        let pool = SortedPool::from_values(vec![5.0, 3.0, 1.0, 2.0, 4.0]).unwrap();
        assert_eq!(pool.quantile(0.5).unwrap(), 3.0);
    }

    #[test]
    fn pooled_constant_panel() {
        let p = panel_from(&[7.5; 6], 2, 3);
        for tau in [0.05, 0.3, 0.5, 0.9] {
            assert_eq!(pooled_quantile(&p, tau).unwrap().beta_scalar(), 7.5);
        }
    }

    #[test]
    fn pooled_matches_grid_search_at_fractional_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values: Vec<f64> = (0..12).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let p = panel_from(&values, 4, 3);
        let tau = 0.1; // tau*NT = 1.2, so k = 2

        let fit = pooled_quantile(&p, tau).unwrap();
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(fit.beta_scalar(), sorted[1]);

        // Independent oracle: scan every data point as a candidate.
        let mut best = f64::INFINITY;
        let mut best_beta = f64::NAN;
        for &candidate in &sorted {
            let r: Vec<f64> = values.iter().map(|v| v - candidate).collect();
            let obj = check_loss(&r, tau).unwrap();
            if obj < best {
                best = obj;
                best_beta = candidate;
            }
        }
        assert_eq!(fit.beta_scalar(), best_beta);
        assert_abs_diff_eq!(fit.objective, best, epsilon = 1e-12);
    }

    #[test]
    fn order_index_integer_rank_not_pushed_up() {
        // 0.05 * 40000 is 2000 in exact arithmetic but slightly above in f64.
        assert_eq!(order_index(0.05, 40000).unwrap(), 1999);
        assert_eq!(order_index(0.01, 40000).unwrap(), 399);
        assert_eq!(order_index(0.1, 12).unwrap(), 1);
        assert_eq!(order_index(0.5, 5).unwrap(), 2);
    }

    #[test]
    fn objective_matches_independent_reevaluation() {
        let p = random_covariate_panel(3, 5, 4, 2);
        let fit = fit_linear_quantile(&p, 0.3, &SolverOptions::default()).unwrap();
        let (x, y) = design_matrix(&p).unwrap();
        let beta = DVector::from_vec(fit.beta.clone());
        let residuals: Vec<f64> = (0..y.len())
            .map(|i| y[i] - (0..x.ncols()).map(|k| x[(i, k)] * beta[k]).sum::<f64>())
            .collect();
        let obj = check_loss(&residuals, 0.3).unwrap();
        assert_abs_diff_eq!(fit.objective, obj, epsilon = 1e-9 * (1.0 + obj.abs()));
    }

    #[test]
    fn intercept_only_fit_equals_pooled_exactly() {
        let p = {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let y: Vec<f64> = (0..24).map(|_| rng.gen_range(-5.0..5.0)).collect();
            PanelData::with_covariates(4, 6, y, 1, vec![1.0; 24]).unwrap()
        };
        for tau in [0.1, 0.25, 0.5, 0.8] {
            let lin = fit_linear_quantile(&p, tau, &SolverOptions::default()).unwrap();
            let pooled = pooled_quantile(&p, tau).unwrap();
            assert_eq!(lin.beta_scalar(), pooled.beta_scalar());
            assert_eq!(lin.objective, pooled.objective);
        }
    }

    #[test]
    fn noiseless_line_is_interpolated() {
        let n = 4;
        let t = 5;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for cell in 0..n * t {
            let v = cell as f64 / (n * t) as f64;
            x.extend_from_slice(&[1.0, v]);
            y.push(1.0 + 2.0 * v);
        }
        let p = PanelData::with_covariates(n, t, y, 2, x).unwrap();
        for tau in [0.1, 0.5, 0.9] {
            let fit = fit_linear_quantile(&p, tau, &SolverOptions::default()).unwrap();
            assert!(fit.converged);
            assert!(fit.objective.abs() < 1e-7, "objective {}", fit.objective);
            assert_abs_diff_eq!(fit.beta[0], 1.0, epsilon = 1e-5);
            assert_abs_diff_eq!(fit.beta[1], 2.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn interior_point_matches_brute_force() {
        let opts = SolverOptions {
            tol: 1e-10,
            ..Default::default()
        };
        for seed in 0..8 {
            let p = random_covariate_panel(100 + seed, 5, 4, 2);
            let fit = fit_linear_quantile(&p, 0.2, &opts).unwrap();
            let oracle = brute_force_fit(&p, 0.2).unwrap();
            assert!(
                (fit.objective - oracle.objective).abs() <= 1e-8 * (1.0 + oracle.objective),
                "seed {seed}: ipm {} vs oracle {}",
                fit.objective,
                oracle.objective
            );
        }
    }

    #[test]
    fn brute_force_d1_returns_pooled_value() {
        let p = {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let y: Vec<f64> = (0..12).map(|_| rng.gen_range(-5.0..5.0)).collect();
            PanelData::with_covariates(3, 4, y, 1, vec![1.0; 12]).unwrap()
        };
        for tau in [0.1, 0.5, 0.75] {
            assert_eq!(
                brute_force_fit(&p, tau).unwrap().beta_scalar(),
                pooled_quantile(&p, tau).unwrap().beta_scalar()
            );
        }
    }

    #[test]
    fn brute_force_two_parallel_lines() {
        // Points on y = x and y = x + 1 at x in {0, 1, 2}.
        let xs = [0.0, 1.0, 2.0, 0.0, 1.0, 2.0];
        let ys = [0.0, 1.0, 2.0, 1.0, 2.0, 3.0];
        let mut xdata = Vec::new();
        for &v in &xs {
            xdata.extend_from_slice(&[1.0, v]);
        }
        let p = PanelData::with_covariates(2, 3, ys.to_vec(), 2, xdata).unwrap();
        let tau = 0.5;

        // Hand enumeration over the <= 15 candidate lines through point pairs.
        let mut best = f64::INFINITY;
        for i in 0..6 {
            for j in (i + 1)..6 {
                if xs[i] == xs[j] {
                    continue;
                }
                let slope = (ys[j] - ys[i]) / (xs[j] - xs[i]);
                let intercept = ys[i] - slope * xs[i];
                let r: Vec<f64> = (0..6).map(|k| ys[k] - intercept - slope * xs[k]).collect();
                best = best.min(check_loss(&r, tau).unwrap());
            }
        }
        let fit = brute_force_fit(&p, tau).unwrap();
        assert_abs_diff_eq!(fit.objective, best, epsilon = 1e-12);
    }

    #[test]
    fn brute_force_guards() {
        let y: Vec<f64> = (0..225).map(|k| k as f64).collect();
        let p = PanelData::with_covariates(15, 15, y, 1, vec![1.0; 225]).unwrap();
        assert!(matches!(
            brute_force_fit(&p, 0.5),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn fit_equivariance_under_location_scale() {
        let p = random_covariate_panel(21, 4, 5, 2);
        let opts = SolverOptions {
            tol: 1e-10,
            ..Default::default()
        };
        let tau = 0.3;
        let base = fit_linear_quantile(&p, tau, &opts).unwrap();

        let (a_scale, b_shift) = (2.5, -1.75);
        let y2: Vec<f64> = p.y_values().iter().map(|v| a_scale * v + b_shift).collect();
        let mut x2 = Vec::new();
        for i in 0..p.n_rows() {
            for t in 0..p.n_cols() {
                x2.extend_from_slice(p.x_row(i, t));
            }
        }
        let p2 = PanelData::with_covariates(p.n_rows(), p.n_cols(), y2, 2, x2).unwrap();
        let transformed = fit_linear_quantile(&p2, tau, &opts).unwrap();

        assert_abs_diff_eq!(
            transformed.beta[0],
            a_scale * base.beta[0] + b_shift,
            epsilon = 1e-5
        );
        assert_abs_diff_eq!(transformed.beta[1], a_scale * base.beta[1], epsilon = 1e-5);
    }

    #[test]
    fn warm_started_path_agrees_with_cold_fits() {
        let p = random_covariate_panel(33, 6, 5, 3);
        let opts = SolverOptions {
            tol: 1e-10,
            ..Default::default()
        };
        let taus = [0.05, 0.1, 0.2, 0.4];
        let path = fit_linear_quantile_path(&p, &taus, &opts).unwrap();
        for (k, &tau) in taus.iter().enumerate() {
            let cold = fit_linear_quantile(&p, tau, &opts).unwrap();
            assert!(
                (path[k].objective - cold.objective).abs() <= 1e-8 * (1.0 + cold.objective),
                "tau {tau}: warm {} cold {}",
                path[k].objective,
                cold.objective
            );
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn subgradient_counts_bracket_rank(
                values in proptest::collection::vec(-100.0f64..100.0, 6..36),
                tau in 0.02f64..0.98,
            ) {
                let nt = values.len() / 2 * 2;
                let values = &values[..nt];
                let p = panel_from(values, 2, nt / 2);
                let beta = pooled_quantile(&p, tau).unwrap().beta_scalar();
                let below = values.iter().filter(|&&v| v < beta).count() as f64;
                let at_or_below = values.iter().filter(|&&v| v <= beta).count() as f64;
                let target = tau * nt as f64;
                prop_assert!(below <= target + 1e-9);
                prop_assert!(at_or_below >= target - 1e-9);
            }

            #[test]
            fn pooled_is_monotone_in_tau(
                values in proptest::collection::vec(-100.0f64..100.0, 8..24),
                tau1 in 0.05f64..0.9,
                delta in 0.0f64..0.09,
            ) {
                let nt = values.len() / 2 * 2;
                let p = panel_from(&values[..nt], 2, nt / 2);
                let b1 = pooled_quantile(&p, tau1).unwrap().beta_scalar();
                let b2 = pooled_quantile(&p, tau1 + delta).unwrap().beta_scalar();
                prop_assert!(b2 >= b1);
            }

            #[test]
            fn pooled_location_scale_equivariance_is_exact(
                values in proptest::collection::vec(-50.0f64..50.0, 8..20),
                tau in 0.05f64..0.95,
                a in 0.1f64..8.0,
                b in -20.0f64..20.0,
            ) {
                let nt = values.len() / 2 * 2;
                let p = panel_from(&values[..nt], 2, nt / 2);
                let transformed: Vec<f64> = values[..nt].iter().map(|v| a * v + b).collect();
                let pt = panel_from(&transformed, 2, nt / 2);
                let base = pooled_quantile(&p, tau).unwrap().beta_scalar();
                let shifted = pooled_quantile(&pt, tau).unwrap().beta_scalar();
                prop_assert_eq!(shifted, a * base + b);
            }
        }
    }
}
