//! Balanced two-way panel data model and CSV ingestion.
//!
//! A panel holds outcomes `Y_it` on a complete N x T grid of row clusters i
//! and column clusters t, with an optional covariate vector `X_it` whose
//! first coordinate is always the constant 1. Panels are immutable after
//! construction and safe to share across parallel workers.
//!
//! Input CSV format: header `i,t,y[,x1,...]`, one row per cell, `i` and `t`
//! positive integers. Cluster labels are re-indexed densely on load; the
//! original labels are kept for output. Files ending in `.gz` are
//! transparently decompressed.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Declared tail type of the outcome distribution, controlling the tail
/// scale function H(x) in regression inference: heavy (`Type2`, xi > 0),
/// thin (`Type1`, xi = 0), or bounded support (`Type3`, xi < 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TailType {
    Type1,
    Type2,
    Type3,
}

/// Tuning constants for tail inference.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TuningParams {
    /// Spacing multiple (> 1) used for the quantile spacing scale.
    pub m: f64,
    /// Spacing multiple (> 1) used for the tail-index ratio.
    pub l: f64,
    /// Confidence level is 1 - alpha.
    pub alpha: f64,
    /// Declared tail type; only regression inference consumes it.
    pub tail_type: TailType,
}

impl Default for TuningParams {
    fn default() -> Self {
        TuningParams {
            m: 2.0,
            l: 2.0,
            alpha: 0.05,
            tail_type: TailType::Type1,
        }
    }
}

impl TuningParams {
    /// Check that the tuning constants are admissible for quantile level `tau`.
    /// Requires m > 1, l > 1, alpha in (0,1) and m*l*tau < 1.
    pub fn validate_for_tau(&self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::TauOutOfRange { tau });
        }
        if !(self.m > 1.0) {
            return Err(Error::InvalidTuning {
                detail: format!("m must exceed 1, got {}", self.m),
            });
        }
        if !(self.l > 1.0) {
            return Err(Error::InvalidTuning {
                detail: format!("l must exceed 1, got {}", self.l),
            });
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidTuning {
                detail: format!("alpha must lie in (0,1), got {}", self.alpha),
            });
        }
        if self.m * self.l * tau >= 1.0 {
            return Err(Error::InvalidTuning {
                detail: format!(
                    "m*l*tau = {} must be below 1 (m={}, l={}, tau={})",
                    self.m * self.l * tau,
                    self.m,
                    self.l,
                    tau
                ),
            });
        }
        Ok(())
    }
}

/// Covariate block of a panel: `dim` values per cell, first coordinate 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    dim: usize,
    /// Row-major N*T*dim.
    data: Vec<f64>,
}

impl Covariates {
    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// A balanced N x T panel of outcomes with optional covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    n_rows: usize,
    n_cols: usize,
    /// Row-major N*T outcomes.
    y: Vec<f64>,
    x: Option<Covariates>,
    /// Original cluster labels, in dense-index order.
    row_labels: Vec<u64>,
    col_labels: Vec<u64>,
}

impl PanelData {
    /// Build an outcome-only panel from a row-major N*T value vector.
    pub fn from_y(n_rows: usize, n_cols: usize, y: Vec<f64>) -> Result<Self> {
        if n_rows < 2 || n_cols < 2 {
            return Err(Error::TooFewClusters { n_rows, n_cols });
        }
        if y.len() != n_rows * n_cols {
            return Err(Error::UnbalancedPanel {
                detail: format!("expected {} cells, got {}", n_rows * n_cols, y.len()),
            });
        }
        Ok(PanelData {
            n_rows,
            n_cols,
            y,
            x: None,
            row_labels: (1..=n_rows as u64).collect(),
            col_labels: (1..=n_cols as u64).collect(),
        })
    }

    /// Build a panel with covariates. `x` is row-major N*T*d and every cell's
    /// first covariate coordinate must equal 1.
    pub fn with_covariates(
        n_rows: usize,
        n_cols: usize,
        y: Vec<f64>,
        d: usize,
        x: Vec<f64>,
    ) -> Result<Self> {
        let mut panel = Self::from_y(n_rows, n_cols, y)?;
        if d == 0 || x.len() != n_rows * n_cols * d {
            return Err(Error::UnbalancedPanel {
                detail: format!(
                    "covariate block must be N*T*d = {}, got {}",
                    n_rows * n_cols * d,
                    x.len()
                ),
            });
        }
        for cell in 0..n_rows * n_cols {
            let v = x[cell * d];
            if v != 1.0 {
                return Err(Error::NonNumericField {
                    row: cell + 1,
                    detail: format!("first covariate coordinate must be 1, got {v}"),
                });
            }
        }
        panel.x = Some(Covariates { dim: d, data: x });
        Ok(panel)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Total cell count N*T.
    pub fn n_cells(&self) -> usize {
        self.n_rows * self.n_cols
    }

    /// Covariate dimension d, or 0 when the panel has no covariates.
    pub fn dim(&self) -> usize {
        self.x.as_ref().map_or(0, |c| c.dim)
    }

    pub fn has_covariates(&self) -> bool {
        self.x.is_some()
    }

    #[inline]
    pub fn y(&self, i: usize, t: usize) -> f64 {
        self.y[i * self.n_cols + t]
    }

    /// All outcomes in row-major order.
    pub fn y_values(&self) -> &[f64] {
        &self.y
    }

    /// Covariate vector for cell (i, t). Panics if the panel has none.
    #[inline]
    pub fn x_row(&self, i: usize, t: usize) -> &[f64] {
        let c = self.x.as_ref().expect("panel has no covariates");
        let start = (i * self.n_cols + t) * c.dim;
        &c.data[start..start + c.dim]
    }

    pub fn row_labels(&self) -> &[u64] {
        &self.row_labels
    }

    pub fn col_labels(&self) -> &[u64] {
        &self.col_labels
    }

    /// Sample mean of the covariate vector over all cells.
    pub fn covariate_mean(&self) -> Result<Vec<f64>> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::MissingCovariates);
        }
        let mut mean = vec![0.0; d];
        for i in 0..self.n_rows {
            for t in 0..self.n_cols {
                for (k, v) in self.x_row(i, t).iter().enumerate() {
                    mean[k] += v;
                }
            }
        }
        let nt = self.n_cells() as f64;
        for v in &mut mean {
            *v /= nt;
        }
        Ok(mean)
    }

    /// Gram matrix (1/NT) sum of X X' over all cells.
    pub fn gram_matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::MissingCovariates);
        }
        let mut gram = DMatrix::zeros(d, d);
        for i in 0..self.n_rows {
            for t in 0..self.n_cols {
                let row = self.x_row(i, t);
                for a in 0..d {
                    for b in 0..d {
                        gram[(a, b)] += row[a] * row[b];
                    }
                }
            }
        }
        gram /= self.n_cells() as f64;
        Ok(gram)
    }

    /// Panel with all outcomes negated; used for upper-tail inference by
    /// reflection. Covariates and labels are unchanged.
    pub fn reflected(&self) -> PanelData {
        let mut out = self.clone();
        for v in &mut out.y {
            *v = -*v;
        }
        out
    }

    /// Panel with rows and columns permuted (test helper; estimators must be
    /// exchangeable in i and in t).
    pub fn permuted(&self, row_perm: &[usize], col_perm: &[usize]) -> PanelData {
        assert_eq!(row_perm.len(), self.n_rows);
        assert_eq!(col_perm.len(), self.n_cols);
        let d = self.dim();
        let mut y = Vec::with_capacity(self.y.len());
        let mut xdata = Vec::with_capacity(self.y.len() * d);
        for &i in row_perm {
            for &t in col_perm {
                y.push(self.y(i, t));
                if d > 0 {
                    xdata.extend_from_slice(self.x_row(i, t));
                }
            }
        }
        PanelData {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            y,
            x: if d > 0 {
                Some(Covariates {
                    dim: d,
                    data: xdata,
                })
            } else {
                None
            },
            row_labels: row_perm.iter().map(|&i| self.row_labels[i]).collect(),
            col_labels: col_perm.iter().map(|&t| self.col_labels[t]).collect(),
        }
    }

    /// Serialize to CSV with the original cluster labels. Values are printed
    /// with shortest round-trip formatting, so `load_csv` recovers the panel
    /// exactly.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.dim();
        let mut header = String::from("i,t,y");
        for k in 1..d {
            header.push_str(&format!(",x{k}"));
        }
        writeln!(out, "{header}")?;
        for i in 0..self.n_rows {
            for t in 0..self.n_cols {
                let mut line = format!(
                    "{},{},{}",
                    self.row_labels[i],
                    self.col_labels[t],
                    self.y(i, t)
                );
                if d > 0 {
                    for v in &self.x_row(i, t)[1..] {
                        line.push_str(&format!(",{v}"));
                    }
                }
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }
}

/// Diagnostics produced by [`validate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_rows: usize,
    pub n_cols: usize,
    pub dim: usize,
    /// Minimum eigenvalue of the covariate Gram matrix (1 for outcome-only
    /// panels, where the implicit design is the constant regressor).
    pub gram_min_eigenvalue: f64,
    /// tau * N * T for the requested quantile level, if one was given.
    pub tau_nt: Option<f64>,
    pub warnings: Vec<String>,
}

/// Report panel dimensions and design conditioning, and flag quantile levels
/// whose effective tail sample tau*N*T is too small for intermediate-order
/// asymptotics to be trustworthy.
pub fn validate(panel: &PanelData, tau: Option<f64>) -> Result<ValidationReport> {
    let (min_eig, dim) = if panel.has_covariates() {
        let gram = panel.gram_matrix()?;
        let d = panel.dim();
        let trace: f64 = gram.trace();
        let eigs = gram.clone().symmetric_eigen().eigenvalues;
        let min_eig = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_eig < 1e-10 * trace / d as f64 {
            return Err(Error::SingularDesign {
                detail: format!(
                    "Gram matrix minimum eigenvalue {min_eig:e} below threshold {:e}",
                    1e-10 * trace / d as f64
                ),
            });
        }
        (min_eig, d)
    } else {
        (1.0, 0)
    };

    let mut warnings = Vec::new();
    let tau_nt = tau.map(|tau| tau * panel.n_cells() as f64);
    if let Some(v) = tau_nt {
        if v < 30.0 {
            warnings.push(format!(
                "tau*N*T = {v:.1} is small; intermediate-order inference needs a growing tail sample"
            ));
        }
    }

    Ok(ValidationReport {
        n_rows: panel.n_rows(),
        n_cols: panel.n_cols(),
        dim,
        gram_min_eigenvalue: min_eig,
        tau_nt,
        warnings,
    })
}

/// Parse a balanced panel from CSV bytes (see module docs for the format).
pub fn load_csv<R: Read>(source: R) -> Result<PanelData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);

    let headers = reader.headers()?.clone();
    if headers.len() < 3 {
        return Err(Error::UnbalancedPanel {
            detail: format!(
                "header must be i,t,y[,x1,...], got {} column(s)",
                headers.len()
            ),
        });
    }
    let n_x_cols = headers.len() - 3;

    struct Row {
        i: u64,
        t: u64,
        y: f64,
        x: Vec<f64>,
    }

    let mut rows: Vec<Row> = Vec::new();
    let mut seen: HashMap<(u64, u64), ()> = HashMap::new();

    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = idx + 1;
        if record.len() != headers.len() {
            return Err(Error::NonNumericField {
                row: row_no,
                detail: format!("expected {} fields, got {}", headers.len(), record.len()),
            });
        }
        let parse_label = |field: &str, name: &str| -> Result<u64> {
            field
                .parse::<u64>()
                .ok()
                .filter(|&v| v >= 1)
                .ok_or_else(|| Error::NonNumericField {
                    row: row_no,
                    detail: format!("{name} must be a positive integer, got {field:?}"),
                })
        };
        let parse_value = |field: &str, name: &str| -> Result<f64> {
            let v = field.parse::<f64>().map_err(|_| Error::NonNumericField {
                row: row_no,
                detail: format!("{name} is not numeric: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonNumericField {
                    row: row_no,
                    detail: format!("{name} must be finite, got {field:?}"),
                });
            }
            Ok(v)
        };

        let i = parse_label(&record[0], "i")?;
        let t = parse_label(&record[1], "t")?;
        let y = parse_value(&record[2], "y")?;
        let mut x = Vec::with_capacity(n_x_cols);
        for k in 0..n_x_cols {
            x.push(parse_value(&record[3 + k], &headers[3 + k])?);
        }

        if seen.insert((i, t), ()).is_some() {
            return Err(Error::DuplicateCell { i, t });
        }
        rows.push(Row { i, t, y, x });
    }

    // Dense re-indexing of the original labels.
    let mut row_labels: Vec<u64> = rows.iter().map(|r| r.i).collect();
    row_labels.sort_unstable();
    row_labels.dedup();
    let mut col_labels: Vec<u64> = rows.iter().map(|r| r.t).collect();
    col_labels.sort_unstable();
    col_labels.dedup();

    let n = row_labels.len();
    let t_count = col_labels.len();
    if n < 2 || t_count < 2 {
        return Err(Error::TooFewClusters {
            n_rows: n,
            n_cols: t_count,
        });
    }

    if rows.len() != n * t_count {
        // Distinguish a ragged index structure from an evenly thinned grid:
        // unequal per-row (or per-column) cell counts mean the index sets are
        // not rectangular; equal counts with missing cells name the first gap.
        let mut per_row: HashMap<u64, usize> = HashMap::new();
        let mut per_col: HashMap<u64, usize> = HashMap::new();
        for r in &rows {
            *per_row.entry(r.i).or_insert(0) += 1;
            *per_col.entry(r.t).or_insert(0) += 1;
        }
        let rows_even = rows.len() % n == 0 && per_row.values().all(|&c| c == rows.len() / n);
        let cols_even =
            rows.len() % t_count == 0 && per_col.values().all(|&c| c == rows.len() / t_count);
        if !rows_even || !cols_even {
            return Err(Error::UnbalancedPanel {
                detail: format!("{} rows for {}x{} distinct labels", rows.len(), n, t_count),
            });
        }
        for &il in &row_labels {
            for &tl in &col_labels {
                if !seen.contains_key(&(il, tl)) {
                    return Err(Error::MissingCell { i: il, t: tl });
                }
            }
        }
        unreachable!("cell count mismatch without an identifiable gap");
    }

    let row_index: HashMap<u64, usize> = row_labels
        .iter()
        .enumerate()
        .map(|(k, &l)| (l, k))
        .collect();
    let col_index: HashMap<u64, usize> = col_labels
        .iter()
        .enumerate()
        .map(|(k, &l)| (l, k))
        .collect();

    let mut y = vec![0.0; n * t_count];
    let d = if n_x_cols > 0 { n_x_cols + 1 } else { 0 };
    let mut xdata = vec![0.0; n * t_count * d];
    for r in &rows {
        let cell = row_index[&r.i] * t_count + col_index[&r.t];
        y[cell] = r.y;
        if d > 0 {
            xdata[cell * d] = 1.0;
            xdata[cell * d + 1..cell * d + d].copy_from_slice(&r.x);
        }
    }

    Ok(PanelData {
        n_rows: n,
        n_cols: t_count,
        y,
        x: if d > 0 {
            Some(Covariates {
                dim: d,
                data: xdata,
            })
        } else {
            None
        },
        row_labels,
        col_labels,
    })
}

/// Load a panel from a file path; `.gz` inputs are decompressed on the fly.
pub fn load_csv_path<P: AsRef<Path>>(path: P) -> Result<PanelData> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        load_csv(flate2::read::MultiGzDecoder::new(file))
    } else {
        load_csv(file)
    }
}

/// Stack the covariates into an NT x d matrix and outcomes into an NT vector,
/// in row-major cell order.
pub fn design_matrix(panel: &PanelData) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let d = panel.dim();
    if d == 0 {
        return Err(Error::MissingCovariates);
    }
    let n = panel.n_cells();
    let mut x = DMatrix::zeros(n, d);
    let mut y = DVector::zeros(n);
    let mut r = 0;
    for i in 0..panel.n_rows() {
        for t in 0..panel.n_cols() {
            for (k, v) in panel.x_row(i, t).iter().enumerate() {
                x[(r, k)] = *v;
            }
            y[r] = panel.y(i, t);
            r += 1;
        }
    }
    Ok((x, y))
}
