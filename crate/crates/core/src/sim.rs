//! Data-generating processes and the Monte Carlo coverage lab.
//!
//! Replication seeds are derived from the study seed by counter-based
//! splitting, and each panel draws its row factors, column factors, and
//! idiosyncratic noise from fixed, labelled generator streams. Results are
//! therefore reproducible bit for bit regardless of how replications are
//! scheduled across workers.

use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{PanelData, TuningParams};
use crate::solver::SortedPool;
use crate::uncond::{infer_from_pool, normal_quantile};

/// Simulation design families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignFamily {
    /// Y_it = sigma_alpha a_i + sigma_gamma g_t + sigma_eps e_it.
    Additive,
    /// Y_it = sigma_alpha a_i * sigma_gamma g_t + sigma_eps e_it.
    Interactive,
    /// Y_it = sigma_eps e_it.
    IidNormal,
    /// Y = 1 + x'1 + additive two-way error; covariates iid Uniform(0,1).
    LocationRegression,
    /// Y_it = -U_it^(-xi) with U iid Uniform(0,1): lower tail index xi.
    ParetoTail,
}

impl DesignFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            DesignFamily::Additive => "additive",
            DesignFamily::Interactive => "interactive",
            DesignFamily::IidNormal => "iid_normal",
            DesignFamily::LocationRegression => "location_regression",
            DesignFamily::ParetoTail => "pareto_tail",
        }
    }
}

/// One simulation design cell.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimDesign {
    pub family: DesignFamily,
    pub sigma_alpha: f64,
    pub sigma_gamma: f64,
    pub sigma_eps: f64,
    pub n: usize,
    pub t: usize,
    /// Covariate dimension for regression designs (including the intercept).
    pub d: usize,
    /// Tail index for `ParetoTail`.
    pub xi_true: f64,
}

// Generator stream labels; each factor of a design reads its own stream so
// panels are reproducible from the replication seed alone.
const STREAM_ALPHA: u64 = 0;
const STREAM_GAMMA: u64 = 1;
const STREAM_EPS: u64 = 2;
const STREAM_COVARIATES: u64 = 3;

fn stream_rng(seed: u64, label: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label);
    rng
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based replication seed: a pure function of (study seed, cell,
/// replication), independent of scheduling order.
pub fn split_seed(seed: u64, cell: u64, rep: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ cell.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
    h = splitmix64(h ^ rep.wrapping_mul(0xBF58_476D_1CE4_E5B9).wrapping_add(2));
    h
}

/// Draw one panel for the design; the same `rep_seed` reproduces the panel
/// bit for bit.
pub fn generate(design: &SimDesign, rep_seed: u64) -> PanelData {
    let (n, t) = (design.n, design.t);
    assert!(n >= 2 && t >= 2, "designs need at least 2x2 panels");

    match design.family {
        DesignFamily::Additive | DesignFamily::Interactive | DesignFamily::IidNormal => {
            let mut ar = stream_rng(rep_seed, STREAM_ALPHA);
            let mut gr = stream_rng(rep_seed, STREAM_GAMMA);
            let mut er = stream_rng(rep_seed, STREAM_EPS);
            let alphas: Vec<f64> = (0..n).map(|_| ar.sample(StandardNormal)).collect();
            let gammas: Vec<f64> = (0..t).map(|_| gr.sample(StandardNormal)).collect();
            let mut y = Vec::with_capacity(n * t);
            for i in 0..n {
                for tt in 0..t {
                    let eps: f64 = er.sample(StandardNormal);
                    let v = match design.family {
                        DesignFamily::Additive => {
                            design.sigma_alpha * alphas[i]
                                + design.sigma_gamma * gammas[tt]
                                + design.sigma_eps * eps
                        }
                        DesignFamily::Interactive => {
                            design.sigma_alpha * alphas[i] * design.sigma_gamma * gammas[tt]
                                + design.sigma_eps * eps
                        }
                        _ => design.sigma_eps * eps,
                    };
                    y.push(v);
                }
            }
            PanelData::from_y(n, t, y).expect("generated panel is balanced")
        }
        DesignFamily::ParetoTail => {
            let mut er = stream_rng(rep_seed, STREAM_EPS);
            let y: Vec<f64> = (0..n * t)
                .map(|_| {
                    let u: f64 = er.sample(Open01);
                    -u.powf(-design.xi_true)
                })
                .collect();
            PanelData::from_y(n, t, y).expect("generated panel is balanced")
        }
        DesignFamily::LocationRegression => {
            let d = design.d.max(2);
            let mut ar = stream_rng(rep_seed, STREAM_ALPHA);
            let mut gr = stream_rng(rep_seed, STREAM_GAMMA);
            let mut er = stream_rng(rep_seed, STREAM_EPS);
            let mut xr = stream_rng(rep_seed, STREAM_COVARIATES);
            let alphas: Vec<f64> = (0..n).map(|_| ar.sample(StandardNormal)).collect();
            let gammas: Vec<f64> = (0..t).map(|_| gr.sample(StandardNormal)).collect();
            let mut y = Vec::with_capacity(n * t);
            let mut x = Vec::with_capacity(n * t * d);
            for i in 0..n {
                for tt in 0..t {
                    let eps: f64 = er.sample(StandardNormal);
                    x.push(1.0);
                    // Unit slope on every non-intercept covariate.
                    let mut level = 1.0;
                    for _ in 1..d {
                        let v: f64 = xr.gen();
                        x.push(v);
                        level += v;
                    }
                    y.push(
                        level
                            + design.sigma_alpha * alphas[i]
                            + design.sigma_gamma * gammas[tt]
                            + design.sigma_eps * eps,
                    );
                }
            }
            PanelData::with_covariates(n, t, y, d, x).expect("generated panel is balanced")
        }
    }
}

/// Coverage target and, for simulated oracles, its own Monte Carlo error.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrueQuantile {
    pub value: f64,
    pub mc_se: Option<f64>,
}

/// Population tau-quantile of the pooled outcome for a design.
pub fn true_quantile(design: &SimDesign, tau: f64, cache: &OracleCache) -> Result<TrueQuantile> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::TauOutOfRange { tau });
    }
    match design.family {
        DesignFamily::Additive => {
            let sd = (design.sigma_alpha.powi(2)
                + design.sigma_gamma.powi(2)
                + design.sigma_eps.powi(2))
            .sqrt();
            Ok(TrueQuantile {
                value: sd * normal_quantile(tau),
                mc_se: None,
            })
        }
        DesignFamily::IidNormal => Ok(TrueQuantile {
            value: design.sigma_eps * normal_quantile(tau),
            mc_se: None,
        }),
        DesignFamily::ParetoTail => Ok(TrueQuantile {
            value: -tau.powf(-design.xi_true),
            mc_se: None,
        }),
        DesignFamily::Interactive => {
            if design.sigma_alpha * design.sigma_gamma == 0.0 {
                // The product factor vanishes and the outcome is pure noise.
                return Ok(TrueQuantile {
                    value: design.sigma_eps * normal_quantile(tau),
                    mc_se: None,
                });
            }
            cache.interactive_quantile(
                design.sigma_alpha,
                design.sigma_gamma,
                design.sigma_eps,
                tau,
            )
        }
        DesignFamily::LocationRegression => Err(Error::Unsupported {
            detail: "pooled quantile target is not defined for regression designs".into(),
        }),
    }
}

/// Disk-backed cache of simulated quantile oracles for the interactive
/// design. Entries are written atomically, so concurrent readers only ever
/// see complete files.
#[derive(Debug, Clone)]
pub struct OracleCache {
    dir: PathBuf,
    draws: usize,
}

#[derive(Serialize, Deserialize)]
struct OracleRecord {
    sigma_alpha: f64,
    sigma_gamma: f64,
    sigma_eps: f64,
    tau: f64,
    value: f64,
    mc_se: f64,
    draws: usize,
}

impl OracleCache {
    pub const DEFAULT_DRAWS: usize = 10_000_000;

    pub fn new(dir: impl Into<PathBuf>) -> Self {
        OracleCache {
            dir: dir.into(),
            draws: Self::DEFAULT_DRAWS,
        }
    }

    /// Cache in the system temp directory (shared across runs).
    pub fn default_location() -> Self {
        Self::new(std::env::temp_dir().join("eqc-oracle-cache"))
    }

    /// Reduced draw count, for tests.
    pub fn with_draws(mut self, draws: usize) -> Self {
        self.draws = draws;
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn key(&self, sa: f64, sg: f64, se: f64, tau: f64) -> PathBuf {
        self.dir.join(format!(
            "interactive-{:016x}-{:016x}-{:016x}-{:016x}-{}.json",
            sa.to_bits(),
            sg.to_bits(),
            se.to_bits(),
            tau.to_bits(),
            self.draws
        ))
    }

    /// Simulated pooled tau-quantile of sa*A * sg*G + se*E with A, G, E
    /// standard normal, cached on disk.
    pub fn interactive_quantile(
        &self,
        sa: f64,
        sg: f64,
        se: f64,
        tau: f64,
    ) -> Result<TrueQuantile> {
        let path = self.key(sa, sg, se, tau);
        if let Ok(bytes) = std::fs::read(&path) {
            if let Ok(rec) = serde_json::from_slice::<OracleRecord>(&bytes) {
                return Ok(TrueQuantile {
                    value: rec.value,
                    mc_se: Some(rec.mc_se),
                });
            }
        }

        let n = self.draws;
        let seed = splitmix64(sa.to_bits() ^ splitmix64(sg.to_bits()) ^ splitmix64(se.to_bits()));
        let mut rng = stream_rng(seed, 7);
        let mut draws: Vec<f64> = Vec::with_capacity(n);
        for _ in 0..n {
            let a: f64 = rng.sample(StandardNormal);
            let g: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            draws.push(sa * a * sg * g + se * e);
        }

        let q_at = |p: f64, v: &mut Vec<f64>| -> f64 {
            let k = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
            *v.select_nth_unstable_by(k, |x, y| x.partial_cmp(y).unwrap())
                .1
        };
        let value = q_at(tau, &mut draws);
        // Quantile standard error sqrt(tau(1-tau)/n) / f(q), with the density
        // replaced by a two-sided quantile difference quotient.
        let h = (tau / 2.0).min(0.005);
        let slope = (q_at(tau + h, &mut draws) - q_at(tau - h, &mut draws)) / (2.0 * h);
        let mc_se = (tau * (1.0 - tau) / n as f64).sqrt() * slope;

        std::fs::create_dir_all(&self.dir)?;
        let record = OracleRecord {
            sigma_alpha: sa,
            sigma_gamma: sg,
            sigma_eps: se,
            tau,
            value,
            mc_se,
            draws: n,
        };
        let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
        std::fs::write(
            &tmp,
            serde_json::to_vec_pretty(&record).expect("serializable"),
        )?;
        std::fs::rename(&tmp, &path)?;

        Ok(TrueQuantile {
            value,
            mc_se: Some(mc_se),
        })
    }
}

/// Grid coverage study configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub family: DesignFamily,
    /// Row axis: sigma_alpha values (tail indices for `ParetoTail`).
    pub row_values: Vec<f64>,
    /// Column axis: sigma_gamma values (a single placeholder for `ParetoTail`).
    pub col_values: Vec<f64>,
    pub sigma_eps: f64,
    pub n: usize,
    pub t: usize,
    pub taus: Vec<f64>,
    pub tuning: TuningParams,
    pub reps: u32,
    pub seed: u64,
    /// Worker threads; 0 uses the default pool. Output is identical for any
    /// worker count.
    pub workers: usize,
}

impl StudyConfig {
    fn axis_labels(&self) -> (&'static str, &'static str) {
        match self.family {
            DesignFamily::ParetoTail => ("xi_true", "none"),
            _ => ("sigma_alpha", "sigma_gamma"),
        }
    }

    pub fn design_at(&self, row: usize, col: usize) -> SimDesign {
        let base = SimDesign {
            family: self.family,
            sigma_alpha: 0.0,
            sigma_gamma: 0.0,
            sigma_eps: self.sigma_eps,
            n: self.n,
            t: self.t,
            d: 0,
            xi_true: 0.0,
        };
        match self.family {
            DesignFamily::ParetoTail => SimDesign {
                xi_true: self.row_values[row],
                ..base
            },
            DesignFamily::IidNormal => base,
            _ => SimDesign {
                sigma_alpha: self.row_values[row],
                sigma_gamma: self.col_values[col],
                ..base
            },
        }
    }
}

/// Empirical coverage of the studentized confidence interval on one grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageTable {
    pub family: DesignFamily,
    pub tau: f64,
    pub nominal: f64,
    pub reps: u32,
    pub seed: u64,
    pub m: f64,
    pub l: f64,
    pub row_label: String,
    pub col_label: String,
    pub row_values: Vec<f64>,
    pub col_values: Vec<f64>,
    /// Count of replications whose interval covered the target.
    pub covered: Vec<Vec<u32>>,
    /// Count of replications that failed (degenerate spacings etc.); failed
    /// replications count as non-covering.
    pub failures: Vec<Vec<u32>>,
    pub true_quantiles: Vec<Vec<f64>>,
    pub oracle_se: Vec<Vec<Option<f64>>>,
}

impl CoverageTable {
    pub fn coverage(&self, row: usize, col: usize) -> f64 {
        self.covered[row][col] as f64 / self.reps as f64
    }

    /// CSV rendering: coverage matrix plus a per-row failure total.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        if self.col_label == "none" {
            out.push_str(&format!("{},coverage", self.row_label));
        } else {
            out.push_str(&format!("{}/{}", self.row_label, self.col_label));
            for c in &self.col_values {
                out.push_str(&format!(",{c}"));
            }
        }
        out.push_str(",failures\n");
        for (r, rv) in self.row_values.iter().enumerate() {
            out.push_str(&format!("{rv}"));
            for c in 0..self.col_values.len() {
                out.push_str(&format!(",{}", self.coverage(r, c)));
            }
            let fails: u32 = self.failures[r].iter().sum();
            out.push_str(&format!(",{fails}\n"));
        }
        out
    }
}

/// Full study output: one table per quantile level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageStudy {
    pub config: StudyConfig,
    pub tables: Vec<CoverageTable>,
}

impl CoverageStudy {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("study serializes")
    }
}

/// Run the coverage study. Replications are distributed over workers with
/// counter-based seeds, so the result is identical for any worker count.
pub fn run_coverage(config: &StudyConfig, cache: &OracleCache) -> Result<CoverageStudy> {
    if config.reps == 0 {
        return Err(Error::InvalidTuning {
            detail: "reps must be at least 1".into(),
        });
    }
    if config.taus.is_empty() {
        return Err(Error::InvalidTuning {
            detail: "tau list must not be empty".into(),
        });
    }
    if config.row_values.is_empty() || config.col_values.is_empty() {
        return Err(Error::InvalidTuning {
            detail: "grid axes must not be empty".into(),
        });
    }
    if config.family == DesignFamily::LocationRegression {
        return Err(Error::Unsupported {
            detail: "coverage studies target the pooled quantile designs".into(),
        });
    }
    for &tau in &config.taus {
        config.tuning.validate_for_tau(tau)?;
    }

    let n_rows = config.row_values.len();
    let n_cols = config.col_values.len();
    let n_taus = config.taus.len();

    // Oracle targets first, serially: single writer, many readers afterwards.
    let mut truths = vec![vec![Vec::new(); n_cols]; n_rows];
    for r in 0..n_rows {
        for c in 0..n_cols {
            let design = config.design_at(r, c);
            let per_tau: Result<Vec<TrueQuantile>> = config
                .taus
                .iter()
                .map(|&tau| true_quantile(&design, tau, cache))
                .collect();
            truths[r][c] = per_tau?;
        }
    }

    #[derive(Clone, Copy, PartialEq)]
    enum Outcome {
        Covered,
        NotCovered,
        Failed,
    }

    let run_cell_rep = |task: usize| -> Vec<Outcome> {
        let cell = task / config.reps as usize;
        let rep = (task % config.reps as usize) as u64;
        let (r, c) = (cell / n_cols, cell % n_cols);
        let design = config.design_at(r, c);
        let rep_seed = split_seed(config.seed, cell as u64, rep);
        let panel = generate(&design, rep_seed);
        let pool = match SortedPool::from_panel(&panel) {
            Ok(p) => p,
            Err(_) => return vec![Outcome::Failed; n_taus],
        };
        config
            .taus
            .iter()
            .enumerate()
            .map(
                |(k, &tau)| match infer_from_pool(&panel, &pool, tau, &config.tuning) {
                    Ok(ti) => {
                        let target = truths[r][c][k].value;
                        if ti.ci_low <= target && target <= ti.ci_high {
                            Outcome::Covered
                        } else {
                            Outcome::NotCovered
                        }
                    }
                    Err(_) => Outcome::Failed,
                },
            )
            .collect()
    };

    let n_tasks = n_rows * n_cols * config.reps as usize;
    let outcomes: Vec<Vec<Outcome>> = if config.workers == 0 {
        (0..n_tasks).into_par_iter().map(run_cell_rep).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Unsupported {
                detail: format!("worker pool: {e}"),
            })?;
        pool.install(|| (0..n_tasks).into_par_iter().map(run_cell_rep).collect())
    };

    let mut tables = Vec::with_capacity(n_taus);
    let (row_label, col_label) = config.axis_labels();
    for (k, &tau) in config.taus.iter().enumerate() {
        let mut covered = vec![vec![0u32; n_cols]; n_rows];
        let mut failures = vec![vec![0u32; n_cols]; n_rows];
        for (task, per_tau) in outcomes.iter().enumerate() {
            let cell = task / config.reps as usize;
            let (r, c) = (cell / n_cols, cell % n_cols);
            match per_tau[k] {
                Outcome::Covered => covered[r][c] += 1,
                Outcome::NotCovered => {}
                Outcome::Failed => failures[r][c] += 1,
            }
        }
        tables.push(CoverageTable {
            family: config.family,
            tau,
            nominal: 1.0 - config.tuning.alpha,
            reps: config.reps,
            seed: config.seed,
            m: config.tuning.m,
            l: config.tuning.l,
            row_label: row_label.to_string(),
            col_label: col_label.to_string(),
            row_values: config.row_values.clone(),
            col_values: config.col_values.clone(),
            covered,
            failures,
            true_quantiles: (0..n_rows)
                .map(|r| (0..n_cols).map(|c| truths[r][c][k].value).collect())
                .collect(),
            oracle_se: (0..n_rows)
                .map(|r| (0..n_cols).map(|c| truths[r][c][k].mc_se).collect())
                .collect(),
        });
    }

    Ok(CoverageStudy {
        config: config.clone(),
        tables,
    })
}
