//! `eqc` — extremal quantile estimation and inference on two-way clustered
//! panels.
//!
//! Subcommands: `estimate` (point estimates), `infer` (tail inference with
//! confidence intervals), `simulate` (Monte Carlo coverage studies). JSON is
//! the canonical machine output (`--json`); the default human-readable text
//! is derived from the same report.
//!
//! Exit codes: 0 success, 2 input/flag errors, 3 solver not converged,
//! 4 degenerate tail (spacing/ratio/scale failures).

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use eqc_core::panel::{load_csv, validate, PanelData, TailType, TuningParams, ValidationReport};
use eqc_core::reg::{infer_reg, tail_index_reg, RegTailInference};
use eqc_core::sim::{run_coverage, CoverageStudy, DesignFamily, OracleCache, StudyConfig};
use eqc_core::solver::{fit_linear_quantile, pooled_quantile, QuantileFit, SolverOptions};
use eqc_core::uncond::{infer, infer_upper, TailInference};
use eqc_core::Error;

#[derive(Parser)]
#[command(
    name = "eqc",
    version,
    about = "Extremal quantile inference under two-way clustering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the tau-quantile (pooled, or linear regression with --covariates).
    Estimate(EstimateArgs),
    /// Tail inference: variance, tail index, and confidence intervals.
    Infer(InferArgs),
    /// Monte Carlo coverage study over a simulation design grid.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct EstimateArgs {
    /// Input CSV (header i,t,y[,x1,...]); .gz accepted.
    #[arg(long)]
    input: PathBuf,
    /// Quantile level in (0,1).
    #[arg(long)]
    tau: f64,
    /// Target the upper tail (reflection of the lower-tail estimator).
    #[arg(long)]
    upper: bool,
    /// Use the covariate columns (linear quantile regression).
    #[arg(long)]
    covariates: bool,
    /// Emit the canonical JSON report instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    tau: f64,
    /// Spacing multiple for the scale normalization.
    #[arg(long, default_value_t = 2.0)]
    m: f64,
    /// Spacing multiple for the tail-index ratio.
    #[arg(long, default_value_t = 2.0)]
    l: f64,
    /// One minus the confidence level.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Declared tail type: auto, 1 (thin), 2 (heavy), or 3 (bounded).
    #[arg(long, default_value = "auto")]
    tail_type: String,
    /// Linear functional of the coefficients: "mean" or d comma-separated
    /// values. Repeatable. Defaults to the mean regressor.
    #[arg(long)]
    functional: Vec<String>,
    /// Target the upper tail (outcome-only panels).
    #[arg(long)]
    upper: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Design family: additive, interactive, pareto, or iid.
    #[arg(long)]
    design: String,
    /// Grid values for sigma_alpha and sigma_gamma (additive/interactive).
    #[arg(long, default_value = "1.0,1.5,2.0,2.5,3.0")]
    grid: String,
    /// Tail indices for the pareto design.
    #[arg(long, default_value = "0.25,0.5")]
    xi: String,
    #[arg(long, default_value_t = 2.0)]
    sigma_eps: f64,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 200)]
    t: usize,
    /// Comma-separated quantile levels.
    #[arg(long, default_value = "0.05,0.01")]
    tau: String,
    #[arg(long, default_value_t = 1000)]
    reps: u32,
    /// Study seed; the EQC_SEED environment variable applies when the flag
    /// is absent.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all available). Never changes the output bytes.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long, default_value_t = 2.0)]
    m: f64,
    #[arg(long, default_value_t = 2.0)]
    l: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Output directory for the coverage CSV and JSON files.
    #[arg(long)]
    out: PathBuf,
    /// Directory for the simulated-quantile oracle cache.
    #[arg(long)]
    oracle_cache: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Serialize)]
struct OutputReport {
    command: String,
    version: String,
    input_sha256: Option<String>,
    warnings: Vec<String>,
    result: ReportResult,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportResult {
    Estimate {
        validation: ValidationReport,
        fit: QuantileFit,
    },
    TailInference {
        validation: ValidationReport,
        inference: TailInference,
    },
    RegTailInference {
        validation: ValidationReport,
        inference: RegTailInference,
    },
    Coverage {
        study: CoverageStudy,
        runtime_seconds: f64,
        csv_paths: Vec<String>,
        json_path: String,
    },
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::DegenerateSpacing { .. }
            | Error::NonPositiveRho { .. }
            | Error::NonPositiveH { .. }
            | Error::SingularQH { .. } => 4,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let command_echo = std::env::args().collect::<Vec<_>>().join(" ");
    let outcome = match cli.command {
        Command::Estimate(args) => cmd_estimate(args, command_echo),
        Command::Infer(args) => cmd_infer(args, command_echo),
        Command::Simulate(args) => cmd_simulate(args, command_echo),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            std::process::exit(f.code);
        }
    }
}

fn load_input(path: &PathBuf) -> Result<(PanelData, String), Failure> {
    let bytes = std::fs::read(path)
        .map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
    let digest = hex_digest(&bytes);
    let panel = if path.extension().is_some_and(|e| e == "gz") {
        eqc_core::panel::load_csv_path(path)?
    } else {
        load_csv(bytes.as_slice())?
    };
    Ok((panel, digest))
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn emit(report: &OutputReport, json: bool, human: impl FnOnce(&OutputReport)) {
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(report).expect("report serializes")
        );
    } else {
        human(report);
        for w in &report.warnings {
            println!("warning: {w}");
        }
    }
}

fn cmd_estimate(args: EstimateArgs, command_echo: String) -> Result<i32, Failure> {
    let (panel, digest) = load_input(&args.input)?;
    let report_validation = validate(&panel, Some(args.tau))?;
    let mut warnings = report_validation.warnings.clone();

    let fit = if args.covariates {
        if !panel.has_covariates() {
            return Err(Failure::input(
                "--covariates requested but the input has no covariate columns",
            ));
        }
        let opts = SolverOptions::default();
        if args.upper {
            let mut f = fit_linear_quantile(&panel.reflected(), 1.0 - args.tau, &opts)?;
            f.tau = args.tau;
            f.beta.iter_mut().for_each(|b| *b = -*b);
            f
        } else {
            fit_linear_quantile(&panel, args.tau, &opts)?
        }
    } else if args.upper {
        let mut f = pooled_quantile(&panel.reflected(), 1.0 - args.tau)?;
        f.tau = args.tau;
        f.beta[0] = -f.beta[0];
        f
    } else {
        pooled_quantile(&panel, args.tau)?
    };

    if !fit.converged {
        warnings.push("solver did not converge; reporting the best iterate".into());
    }
    let code = if fit.converged { 0 } else { 3 };
    let report = OutputReport {
        command: command_echo,
        version: env!("CARGO_PKG_VERSION").into(),
        input_sha256: Some(digest),
        warnings,
        result: ReportResult::Estimate {
            validation: report_validation,
            fit,
        },
    };
    emit(&report, args.json, |r| {
        if let ReportResult::Estimate { fit, .. } = &r.result {
            if fit.beta.len() == 1 {
                println!("beta_hat(tau={}) = {}", fit.tau, fit.beta[0]);
            } else {
                println!("beta_hat(tau={}) = {:?}", fit.tau, fit.beta);
            }
            println!(
                "objective = {}, iterations = {}, converged = {}",
                fit.objective, fit.iterations, fit.converged
            );
        }
    });
    Ok(code)
}

fn parse_tail_type(s: &str) -> Result<Option<TailType>, Failure> {
    match s {
        "auto" => Ok(None),
        "1" => Ok(Some(TailType::Type1)),
        "2" => Ok(Some(TailType::Type2)),
        "3" => Ok(Some(TailType::Type3)),
        other => Err(Failure::input(format!(
            "invalid --tail-type {other:?}: expected auto, 1, 2, or 3"
        ))),
    }
}

fn parse_functional(raw: &str, panel: &PanelData) -> Result<Vec<f64>, Failure> {
    if raw == "mean" {
        return Ok(panel.covariate_mean().map_err(Failure::from)?);
    }
    let values: Result<Vec<f64>, _> = raw.split(',').map(|v| v.trim().parse::<f64>()).collect();
    let values = values.map_err(|_| Failure::input(format!("invalid --functional {raw:?}")))?;
    if values.len() != panel.dim() {
        return Err(Failure::input(format!(
            "--functional has {} entries but the design has dimension {}",
            values.len(),
            panel.dim()
        )));
    }
    Ok(values)
}

fn cmd_infer(args: InferArgs, command_echo: String) -> Result<i32, Failure> {
    let (panel, digest) = load_input(&args.input)?;
    let report_validation = validate(&panel, Some(args.tau))?;
    let mut warnings = report_validation.warnings.clone();
    let declared = parse_tail_type(&args.tail_type)?;

    let version = env!("CARGO_PKG_VERSION").to_string();

    if panel.has_covariates() {
        if args.upper {
            return Err(Failure::input(
                "--upper is supported for outcome-only panels",
            ));
        }
        let opts = SolverOptions::default();
        let (_, xi_probe) = tail_index_reg(&panel, args.tau, args.m, args.l, &opts)?;
        let tail_type = match declared {
            Some(t) => {
                warn_on_sign_mismatch(&mut warnings, t, xi_probe);
                t
            }
            None => {
                let chosen = auto_tail_type(xi_probe);
                warnings.push(format!(
                    "tail type auto-selected {} from xi_hat = {xi_probe:.4}",
                    tail_type_name(chosen)
                ));
                chosen
            }
        };
        let tuning = TuningParams {
            m: args.m,
            l: args.l,
            alpha: args.alpha,
            tail_type,
        };

        let mut functionals = Vec::new();
        for raw in &args.functional {
            functionals.push(parse_functional(raw, &panel)?);
        }
        if functionals.is_empty() {
            functionals.push(panel.covariate_mean().map_err(Failure::from)?);
        }

        let inference = infer_reg(&panel, args.tau, &tuning, &functionals, &opts)?;
        let code = if inference.converged { 0 } else { 3 };
        if !inference.converged {
            warnings.push("solver did not converge; reporting the best iterate".into());
        }
        let report = OutputReport {
            command: command_echo,
            version,
            input_sha256: Some(digest),
            warnings,
            result: ReportResult::RegTailInference {
                validation: report_validation,
                inference,
            },
        };
        emit(&report, args.json, |r| {
            if let ReportResult::RegTailInference { inference, .. } = &r.result {
                println!("beta_hat(tau={}) = {:?}", inference.tau, inference.beta_hat);
                println!(
                    "xi_hat = {}, rho_hat = {}, a_hat = {}",
                    inference.xi_hat, inference.rho_hat, inference.a_hat
                );
                for f in &inference.functionals {
                    println!(
                        "functional {:?}: point = {}, ci = [{}, {}]",
                        f.x, f.point, f.ci_low, f.ci_high
                    );
                }
            }
        });
        Ok(code)
    } else {
        let tuning = TuningParams {
            m: args.m,
            l: args.l,
            alpha: args.alpha,
            tail_type: declared.unwrap_or(TailType::Type1),
        };
        let inference = if args.upper {
            infer_upper(&panel, args.tau, &tuning)?
        } else {
            infer(&panel, args.tau, &tuning)?
        };
        match declared {
            Some(t) => warn_on_sign_mismatch(&mut warnings, t, inference.xi_hat),
            None => {
                let chosen = auto_tail_type(inference.xi_hat);
                warnings.push(format!(
                    "tail type auto-selected {} from xi_hat = {:.4}",
                    tail_type_name(chosen),
                    inference.xi_hat
                ));
            }
        }
        let report = OutputReport {
            command: command_echo,
            version,
            input_sha256: Some(digest),
            warnings,
            result: ReportResult::TailInference {
                validation: report_validation,
                inference,
            },
        };
        emit(&report, args.json, |r| {
            if let ReportResult::TailInference { inference, .. } = &r.result {
                println!("beta_hat(tau={}) = {}", inference.tau, inference.beta_hat);
                println!(
                    "xi_hat = {}, rho_hat = {}, a_hat = {}, sigma2_hat = {}",
                    inference.xi_hat, inference.rho_hat, inference.a_hat, inference.sigma2_hat
                );
                println!(
                    "var(beta_hat) = {}, {}% ci = [{}, {}]",
                    inference.var_beta,
                    100.0 * (1.0 - inference.alpha),
                    inference.ci_low,
                    inference.ci_high
                );
            }
        });
        Ok(0)
    }
}

fn auto_tail_type(xi: f64) -> TailType {
    if xi.abs() < 0.05 {
        TailType::Type1
    } else if xi > 0.0 {
        TailType::Type2
    } else {
        TailType::Type3
    }
}

fn tail_type_name(t: TailType) -> &'static str {
    match t {
        TailType::Type1 => "type 1 (thin)",
        TailType::Type2 => "type 2 (heavy)",
        TailType::Type3 => "type 3 (bounded)",
    }
}

fn warn_on_sign_mismatch(warnings: &mut Vec<String>, declared: TailType, xi: f64) {
    let contradiction = match declared {
        TailType::Type1 => xi.abs() >= 0.05,
        TailType::Type2 => xi <= -0.05,
        TailType::Type3 => xi >= 0.05,
    };
    if contradiction {
        warnings.push(format!(
            "declared {} but xi_hat = {xi:.4} points the other way",
            tail_type_name(declared)
        ));
    }
}

fn parse_f64_list(s: &str, flag: &str) -> Result<Vec<f64>, Failure> {
    let values: Result<Vec<f64>, _> = s.split(',').map(|v| v.trim().parse::<f64>()).collect();
    let values = values.map_err(|_| Failure::input(format!("invalid {flag} list {s:?}")))?;
    if values.is_empty() {
        return Err(Failure::input(format!("{flag} list is empty")));
    }
    Ok(values)
}

fn cmd_simulate(args: SimulateArgs, command_echo: String) -> Result<i32, Failure> {
    let family = match args.design.as_str() {
        "additive" => DesignFamily::Additive,
        "interactive" => DesignFamily::Interactive,
        "pareto" => DesignFamily::ParetoTail,
        "iid" => DesignFamily::IidNormal,
        other => {
            return Err(Failure::input(format!(
                "invalid --design {other:?}: expected additive, interactive, pareto, or iid"
            )))
        }
    };

    let seed = match args.seed {
        Some(s) => s,
        None => match std::env::var("EQC_SEED") {
            Ok(v) => v
                .parse::<u64>()
                .map_err(|_| Failure::input(format!("EQC_SEED is not a valid seed: {v:?}")))?,
            Err(_) => 42,
        },
    };

    let (row_values, col_values) = match family {
        DesignFamily::ParetoTail => (parse_f64_list(&args.xi, "--xi")?, vec![0.0]),
        DesignFamily::IidNormal => (vec![0.0], vec![0.0]),
        _ => {
            let grid = parse_f64_list(&args.grid, "--grid")?;
            (grid.clone(), grid)
        }
    };

    let config = StudyConfig {
        family,
        row_values,
        col_values,
        sigma_eps: args.sigma_eps,
        n: args.n,
        t: args.t,
        taus: parse_f64_list(&args.tau, "--tau")?,
        tuning: TuningParams {
            m: args.m,
            l: args.l,
            alpha: args.alpha,
            tail_type: TailType::Type1,
        },
        reps: args.reps,
        seed,
        workers: args.workers,
    };

    let cache = match &args.oracle_cache {
        Some(dir) => OracleCache::new(dir),
        None => OracleCache::default_location(),
    };

    let start = Instant::now();
    let study = run_coverage(&config, &cache)?;
    let runtime_seconds = start.elapsed().as_secs_f64();

    std::fs::create_dir_all(&args.out)
        .map_err(|e| Failure::input(format!("cannot create {}: {e}", args.out.display())))?;
    let mut csv_paths = Vec::new();
    for table in &study.tables {
        let path = args
            .out
            .join(format!("coverage_{}_tau{}.csv", family.as_str(), table.tau));
        std::fs::write(&path, table.to_csv_string()).map_err(Error::from)?;
        csv_paths.push(path.display().to_string());
    }
    let json_path = args.out.join(format!("coverage_{}.json", family.as_str()));
    std::fs::write(&json_path, study.to_json_string()).map_err(Error::from)?;

    let report = OutputReport {
        command: command_echo,
        version: env!("CARGO_PKG_VERSION").into(),
        input_sha256: None,
        warnings: Vec::new(),
        result: ReportResult::Coverage {
            study,
            runtime_seconds,
            csv_paths: csv_paths.clone(),
            json_path: json_path.display().to_string(),
        },
    };
    emit(&report, args.json, |r| {
        if let ReportResult::Coverage {
            study,
            runtime_seconds,
            ..
        } = &r.result
        {
            for table in &study.tables {
                println!("tau = {} (nominal {}):", table.tau, table.nominal);
                print!("{}", table.to_csv_string());
            }
            println!("runtime: {runtime_seconds:.2} s");
            for p in &csv_paths {
                println!("wrote {p}");
            }
        }
    });
    Ok(0)
}
