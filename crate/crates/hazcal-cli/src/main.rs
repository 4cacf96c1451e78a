//! `hazcal`: fit a Cox model on a source cohort, recalibrate its baseline
//! hazard to a target population from summary statistics, project absolute
//! risks under competing events, and run simulation studies.
//!
//! Exit codes: 0 success, 1 internal error, 2 input error, 3 infeasible
//! constraints.

mod commands;
mod io;

use clap::{Args, Parser, Subcommand};
use hazcal_core::Error as CoreError;

#[derive(Debug, Parser)]
#[command(name = "hazcal", version, about = "Baseline-hazard recalibration toolkit")]
struct Cli {
    /// Worker threads for replicate loops and batch prediction
    /// (defaults to the RAYON_NUM_THREADS environment variable, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a Cox proportional-hazards model on a cohort CSV.
    Fit(FitArgs),
    /// Recalibrate the baseline hazard to a target summary.
    Recalibrate(RecalArgs),
    /// Absolute risks with competing events for a subjects CSV.
    Predict(PredictArgs),
    /// Monte-Carlo simulation studies (scenario tables or competing-risk contours).
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Cohort CSV: entry_age,exit_age,event,<covariates...>
    #[arg(long)]
    cohort: std::path::PathBuf,
    /// Output path for the fitted-model JSON.
    #[arg(long)]
    out: std::path::PathBuf,
    /// Convergence tolerance on the max-abs score component.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 50)]
    max_iter: usize,
    /// Comma-separated starting coefficients (zeros when omitted).
    #[arg(long)]
    init_beta: Option<String>,
}

#[derive(Debug, Args)]
struct RecalArgs {
    /// Source cohort CSV (the subjects whose covariates drive the equations).
    #[arg(long)]
    cohort: std::path::PathBuf,
    /// Fitted-model JSON from `hazcal fit`.
    #[arg(long)]
    model: std::path::PathBuf,
    /// Target-summary JSON.
    #[arg(long)]
    summary: std::path::PathBuf,
    /// Constraint-spec JSON; overrides any constraints inside the summary.
    #[arg(long)]
    constraints: Option<std::path::PathBuf>,
    /// unweighted | weighted | both
    #[arg(long, default_value = "both")]
    mode: String,
    /// Output prefix: writes <out>.json and <out>.csv.
    #[arg(long)]
    out: std::path::PathBuf,
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
    /// Use the full covariance of the moment targets when available
    /// (default keeps only its diagonal, the usual situation in practice).
    #[arg(long)]
    full_mu_covariance: bool,
    /// Isotonic projection of the point estimates across times
    /// (presentation aid; not part of the estimator).
    #[arg(long)]
    isotonic: bool,
    /// Exact LP feasibility certificate before solving (slower).
    #[arg(long)]
    strict_feasibility: bool,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Fitted-model JSON.
    #[arg(long)]
    model: std::path::PathBuf,
    /// Recalibration JSON from `hazcal recalibrate`.
    #[arg(long)]
    baseline: std::path::PathBuf,
    /// Which recalibrated baseline to use when the file has both.
    #[arg(long, default_value = "weighted")]
    method: String,
    /// Competing-hazard JSON: {"cumulative_hazard": step, "variance": step | null}.
    #[arg(long)]
    competing: std::path::PathBuf,
    /// Subjects CSV: t0,t1,<covariates...>
    #[arg(long)]
    subjects: std::path::PathBuf,
    /// Output CSV: risk,se,ci_lo,ci_hi.
    #[arg(long)]
    out: std::path::PathBuf,
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
    /// Closed-form delta-method gradient instead of finite differences.
    #[arg(long)]
    analytic_gradient: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario JSON overriding every field below.
    #[arg(long)]
    config_file: Option<std::path::PathBuf>,
    /// Source-baseline preset A1..A4.
    #[arg(long, default_value = "A1")]
    scenario: String,
    /// Target covariate configuration C1..C4.
    #[arg(long, default_value = "C1")]
    covariates: String,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 100_000)]
    m: usize,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Source-cohort censoring shift.
    #[arg(long, default_value_t = -5.0)]
    zeta: f64,
    #[arg(long)]
    censor_sd: Option<f64>,
    /// km | na: survival estimator behind the target summary.
    #[arg(long, default_value = "km")]
    survival_estimator: String,
    /// Comma-separated evaluation times.
    #[arg(long, default_value = "20,40,60")]
    times: String,
    #[arg(long)]
    cad_tmax: Option<u32>,
    /// Output CSV path (a sidecar <out>.run.json echoes the effective config).
    #[arg(long)]
    out: std::path::PathBuf,
    /// Competing-risk contour sweep instead of the estimator table.
    #[arg(long)]
    contour: bool,
    /// Comma-separated event-of-interest baseline multipliers (contour mode).
    #[arg(long, default_value = "0.25,1,4")]
    kappa_events: String,
    /// Comma-separated competing baseline multipliers (contour mode).
    #[arg(long, default_value = "0.25,1,4")]
    kappa_competings: String,
    /// Comma-separated competing log hazard ratios (contour mode).
    #[arg(long, default_value = "0.1397619423751586,0.1397619423751586")]
    beta_c: String,
}

fn exit_code_for(err: &anyhow::Error) -> i32 {
    if let Some(core) = err.downcast_ref::<CoreError>() {
        return match core {
            CoreError::InfeasibleConstraint { .. } => 3,
            CoreError::Csv { .. }
            | CoreError::InvalidInput(_)
            | CoreError::DimensionMismatch(_)
            | CoreError::InvalidSurvival { .. }
            | CoreError::Json(_)
            | CoreError::Io(_) => 2,
            _ => 1,
        };
    }
    if err.downcast_ref::<commands::InfeasibleUsage>().is_some() {
        return 3;
    }
    if err.downcast_ref::<commands::InputUsage>().is_some() {
        return 2;
    }
    1
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // Ignore the error when a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let result = match cli.command {
        Command::Fit(args) => commands::fit(args),
        Command::Recalibrate(args) => commands::recalibrate(args),
        Command::Predict(args) => commands::predict(args),
        Command::Simulate(args) => commands::simulate(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code_for(&err));
    }
}
