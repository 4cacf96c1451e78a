//! Subcommand implementations.

use std::fmt;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use hazcal_core::absrisk::{absolute_risk, absolute_risk_variance, AbsoluteRiskInput, GradientMode};
use hazcal_core::cox::{fit_cox, CoxFit, FitOptions};
use hazcal_core::el::{check_feasibility, evaluate_constraints, ConstraintSpec, FeasibilityCheck};
use hazcal_core::recal::{normal_quantile, recalibrate as run_recalibration, Mode, RecalOptions, RecalResult, TargetSummary};
use hazcal_core::sim::{
    contour_to_csv_writer, run_competing_contour, run_scenario, CovariateConfig, Scenario,
    ScenarioConfig, SurvivalEstimator,
};
use hazcal_core::{Cohort, Error as CoreError};

use crate::io::{parse_f64_list, read_json, write_json_pretty, CompetingHazardFile, RunReport};
use crate::{FitArgs, PredictArgs, RecalArgs, SimulateArgs};

/// Marker error: the request itself is infeasible (exit code 3).
#[derive(Debug)]
pub struct InfeasibleUsage(pub String);

impl fmt::Display for InfeasibleUsage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for InfeasibleUsage {}

/// Marker error: malformed or inconsistent inputs (exit code 2).
#[derive(Debug)]
pub struct InputUsage(pub String);

impl fmt::Display for InputUsage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for InputUsage {}

pub fn format_hazard_ratio(beta: f64) -> String {
    format!("{:.3}", beta.exp())
}

pub fn fit(args: FitArgs) -> Result<()> {
    let cohort = Cohort::from_csv_path(&args.cohort)?;
    let init_beta = match &args.init_beta {
        Some(text) => Some(parse_f64_list(text, "--init-beta")?),
        None => None,
    };
    let fit = fit_cox(
        &cohort,
        &FitOptions {
            init_beta,
            tol: args.tol,
            max_iter: args.max_iter,
        },
    )?;

    let run = RunReport::new(
        "fit",
        json!({
            "cohort": args.cohort,
            "tol": args.tol,
            "max_iter": args.max_iter,
        }),
    );
    #[derive(Serialize)]
    struct ModelFile<'a> {
        run: &'a RunReport,
        #[serde(flatten)]
        fit: &'a CoxFit,
    }
    write_json_pretty(&args.out, &ModelFile { run: &run, fit: &fit }, "model JSON")?;

    println!(
        "fitted {} subjects, {} events, log partial likelihood {:.6}, {} iterations",
        cohort.n(),
        cohort.events_of_interest(),
        fit.log_partial_likelihood,
        fit.iterations
    );
    println!("{:<16} {:>10} {:>10} {:>8}", "covariate", "beta", "se", "HR");
    for (j, name) in fit.covariate_names.iter().enumerate() {
        println!(
            "{:<16} {:>10.4} {:>10.4} {:>8}",
            name,
            fit.beta_hat[j],
            fit.sigma_beta[(j, j)].sqrt(),
            format_hazard_ratio(fit.beta_hat[j]),
        );
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<CoxFit> {
    // Model files carry an extra "run" block; CoxFit's deserializer ignores it.
    read_json::<CoxFit>(path, "model JSON")
}

pub fn recalibrate_cmd_result(args: &RecalArgs) -> Result<Vec<RecalResult>> {
    let cohort = Cohort::from_csv_path(&args.cohort)?;
    let fit = load_model(&args.model)?;
    if fit.covariate_names != cohort.covariate_names {
        return Err(InputUsage(format!(
            "model covariates {:?} do not match cohort covariates {:?}",
            fit.covariate_names, cohort.covariate_names
        ))
        .into());
    }
    let mut summary: TargetSummary = read_json(&args.summary, "target summary JSON")?;
    if let Some(path) = &args.constraints {
        summary.constraints = Some(read_json::<ConstraintSpec>(path, "constraint JSON")?);
    }

    let modes: Vec<Mode> = match args.mode.as_str() {
        "unweighted" => vec![Mode::Unweighted],
        "weighted" => vec![Mode::Weighted],
        "both" => {
            if summary.constraints.is_some() {
                vec![Mode::Unweighted, Mode::Weighted]
            } else {
                eprintln!("note: no constraints in the summary; running unweighted only");
                vec![Mode::Unweighted]
            }
        }
        other => {
            return Err(InputUsage(format!(
                "--mode must be unweighted, weighted, or both; got {other:?}"
            ))
            .into())
        }
    };
    if modes.contains(&Mode::Weighted) && summary.constraints.is_none() {
        return Err(InfeasibleUsage(
            "weighted mode requires moment constraints (none in the summary and no --constraints file)"
                .into(),
        )
        .into());
    }

    if args.strict_feasibility {
        if let Some(spec) = &summary.constraints {
            let h = evaluate_constraints(&cohort, spec)?;
            let feas = check_feasibility(&h, &spec.targets, FeasibilityCheck::Lp)?;
            if !feas.feasible {
                return Err(CoreError::InfeasibleConstraint {
                    direction: feas.direction.unwrap_or_default(),
                }
                .into());
            }
        }
    }

    let options = RecalOptions {
        ci_level: args.ci_level,
        diag_approx: !args.full_mu_covariance,
        isotonic: args.isotonic,
        ..Default::default()
    };
    let mut results = Vec::new();
    for mode in modes {
        let res = run_recalibration(&cohort, &fit, &summary, mode, &options)?;
        if res.near_boundary {
            eprintln!(
                "warning: some empirical-likelihood weights are below 1e-6/n; \
                 variance estimates degrade near the feasibility boundary"
            );
        }
        if mode == Mode::Weighted && !args.full_mu_covariance {
            eprintln!(
                "note: moment-target covariance restricted to its diagonal \
                 (pass --full-mu-covariance to use the full matrix)"
            );
        }
        results.push(res);
    }
    Ok(results)
}

pub fn recalibrate(args: RecalArgs) -> Result<()> {
    let results = recalibrate_cmd_result(&args)?;

    let run = RunReport::new(
        "recalibrate",
        json!({
            "cohort": args.cohort,
            "model": args.model,
            "summary": args.summary,
            "constraints": args.constraints,
            "mode": args.mode,
            "ci_level": args.ci_level,
            "full_mu_covariance": args.full_mu_covariance,
            "isotonic": args.isotonic,
            "strict_feasibility": args.strict_feasibility,
        }),
    );

    #[derive(Serialize)]
    struct RecalFile<'a> {
        run: &'a RunReport,
        results: &'a [RecalResult],
    }
    let json_path = args.out.with_extension("json");
    write_json_pretty(&json_path, &RecalFile { run: &run, results: &results }, "recalibration JSON")?;

    let csv_path = args.out.with_extension("csv");
    let mut wtr = csv::Writer::from_path(&csv_path).context("creating recalibration CSV")?;
    wtr.write_record(["time", "estimate", "se", "ci_lo", "ci_hi", "method"])?;
    for res in &results {
        let label = match res.method {
            Mode::Unweighted => "unweighted",
            Mode::Weighted => "weighted",
        };
        for k in 0..res.times.len() {
            wtr.write_record([
                format!("{}", res.times[k]),
                format!("{}", res.lambda0[k]),
                format!("{}", res.se[k]),
                format!("{}", res.ci_lower[k]),
                format!("{}", res.ci_upper[k]),
                label.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    run.write_sidecar(&csv_path)?;

    for res in &results {
        let label = match res.method {
            Mode::Unweighted => "unweighted",
            Mode::Weighted => "weighted",
        };
        for k in 0..res.times.len() {
            println!(
                "{label:<11} t={:<6} lambda0={:.6} se={:.6} ci=[{:.6}, {:.6}]",
                res.times[k], res.lambda0[k], res.se[k], res.ci_lower[k], res.ci_upper[k]
            );
        }
    }
    Ok(())
}

struct Subject {
    t0: f64,
    t1: f64,
    covariates: Vec<f64>,
}

fn read_subjects(path: &Path, covariate_names: &[String]) -> Result<Vec<Subject>> {
    let mut rdr = csv::Reader::from_path(path).context("opening subjects CSV")?;
    let headers = rdr.headers().context("reading subjects header")?.clone();
    let fields: Vec<&str> = headers.iter().collect();
    if fields.len() < 2 || fields[0] != "t0" || fields[1] != "t1" {
        return Err(InputUsage(format!(
            "subjects CSV header must start with t0,t1; got {:?}",
            fields.join(",")
        ))
        .into());
    }
    let mut order = Vec::with_capacity(covariate_names.len());
    for name in covariate_names {
        match fields.iter().position(|f| f == name) {
            Some(idx) if idx >= 2 => order.push(idx),
            _ => {
                return Err(InputUsage(format!(
                    "subjects CSV lacks model covariate column {name:?} (model needs {covariate_names:?})"
                ))
                .into())
            }
        }
    }
    let mut subjects = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.with_context(|| format!("subjects CSV line {}", i + 2))?;
        let num = |idx: usize| -> Result<f64> {
            record
                .get(idx)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| {
                    anyhow::Error::new(InputUsage(format!(
                        "subjects CSV line {}: bad number in column {idx}",
                        i + 2
                    )))
                })
        };
        let t0 = num(0)?;
        let t1 = num(1)?;
        let covariates = order.iter().map(|&idx| num(idx)).collect::<Result<Vec<f64>>>()?;
        subjects.push(Subject { t0, t1, covariates });
    }
    Ok(subjects)
}

pub fn predict(args: PredictArgs) -> Result<()> {
    let fit = load_model(&args.model)?;

    #[derive(serde::Deserialize)]
    struct RecalFileIn {
        results: Vec<RecalResult>,
    }
    let baseline_file: RecalFileIn = read_json(&args.baseline, "recalibration JSON")?;
    let wanted = match args.method.as_str() {
        "weighted" => Mode::Weighted,
        "unweighted" => Mode::Unweighted,
        other => {
            return Err(InputUsage(format!(
                "--method must be weighted or unweighted; got {other:?}"
            ))
            .into())
        }
    };
    let recal = baseline_file
        .results
        .iter()
        .find(|r| r.method == wanted)
        .ok_or_else(|| {
            InputUsage(format!(
                "recalibration file has no {:?} result; rerun recalibrate or pass --method",
                args.method
            ))
        })?;

    let competing: CompetingHazardFile = read_json(&args.competing, "competing-hazard JSON")?;
    let subjects = read_subjects(&args.subjects, &fit.covariate_names)?;

    let z = normal_quantile(1.0 - (1.0 - args.ci_level) / 2.0);
    let mode = if args.analytic_gradient {
        GradientMode::Analytic
    } else {
        GradientMode::FiniteDifference
    };

    let rows: Vec<Result<(f64, f64)>> = subjects
        .par_iter()
        .map(|subject| {
            let input = AbsoluteRiskInput::from_recal(
                recal,
                &fit,
                competing.cumulative_hazard.clone(),
                competing.variance.as_ref(),
                subject.covariates.clone(),
                subject.t0,
                subject.t1,
            )?;
            let risk = absolute_risk(&input)?;
            let se = absolute_risk_variance(&input, mode)?.sqrt();
            Ok((risk, se))
        })
        .collect();

    let mut warned_empty = false;
    let mut wtr = csv::Writer::from_path(&args.out).context("creating risk CSV")?;
    wtr.write_record(["risk", "se", "ci_lo", "ci_hi"])?;
    for (subject, row) in subjects.iter().zip(rows) {
        let (risk, se) = row?;
        if !warned_empty && recal.lambda0_step()?.knots_in(subject.t0, subject.t1).is_empty() {
            eprintln!(
                "warning: no baseline-hazard jumps inside ({}, {}]; risks in that window are 0",
                subject.t0, subject.t1
            );
            warned_empty = true;
        }
        wtr.write_record([
            format!("{risk}"),
            format!("{se}"),
            format!("{}", (risk - z * se).max(0.0)),
            format!("{}", (risk + z * se).min(1.0)),
        ])?;
    }
    wtr.flush()?;

    let run = RunReport::new(
        "predict",
        json!({
            "model": args.model,
            "baseline": args.baseline,
            "method": args.method,
            "competing": args.competing,
            "subjects": args.subjects,
            "ci_level": args.ci_level,
            "analytic_gradient": args.analytic_gradient,
        }),
    );
    run.write_sidecar(&args.out)?;
    Ok(())
}

pub fn simulate(args: SimulateArgs) -> Result<()> {
    let mut config = match &args.config_file {
        Some(path) => read_json::<ScenarioConfig>(path, "scenario JSON")?,
        None => ScenarioConfig::standard(
            Scenario::parse(&args.scenario)?,
            CovariateConfig::parse(&args.covariates)?,
            args.n,
            args.m,
            args.reps,
            args.seed,
            args.zeta,
        ),
    };
    if args.config_file.is_some() {
        // Explicit flags take precedence over the file.
        config.n_source = args.n;
        config.m_target = args.m;
        config.replicates = args.reps;
        config.seed = args.seed;
        config.censor_zeta = args.zeta;
    }
    if let Some(sd) = args.censor_sd {
        config.censor_sd = sd;
    }
    if let Some(tmax) = args.cad_tmax {
        config.cad_tmax = tmax;
    }
    config.survival_estimator = match args.survival_estimator.as_str() {
        "km" => SurvivalEstimator::KaplanMeier,
        "na" => SurvivalEstimator::NelsonAalen,
        other => {
            return Err(InputUsage(format!(
                "--survival-estimator must be km or na; got {other:?}"
            ))
            .into())
        }
    };
    let times = parse_f64_list(&args.times, "--times")?;

    let run = RunReport::new(
        "simulate",
        serde_json::to_value(&config).context("serializing effective config")?,
    );

    if args.contour {
        let kappa_events = parse_f64_list(&args.kappa_events, "--kappa-events")?;
        let kappa_competings = parse_f64_list(&args.kappa_competings, "--kappa-competings")?;
        let beta_c = parse_f64_list(&args.beta_c, "--beta-c")?;
        if beta_c.len() != config.beta0.len() {
            bail!(InputUsage(format!(
                "--beta-c needs {} components, got {}",
                config.beta0.len(),
                beta_c.len()
            )));
        }
        let rows = run_competing_contour(&config, &kappa_events, &kappa_competings, &beta_c, &times)?;
        let file = std::fs::File::create(&args.out).context("creating contour CSV")?;
        contour_to_csv_writer(&rows, file)?;
        run.write_sidecar(&args.out)?;
        println!("wrote {} contour cells to {}", rows.len(), args.out.display());
    } else {
        let table = run_scenario(&config, &times)?;
        let file = std::fs::File::create(&args.out).context("creating metrics CSV")?;
        table.to_csv_writer(file)?;
        run.write_sidecar(&args.out)?;
        if !table.failures.is_empty() {
            eprintln!("note: excluded replicate failures: {:?}", table.failures);
        }
        println!(
            "wrote {} metric rows to {}",
            table.rows.len(),
            args.out.display()
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::format_hazard_ratio;

    #[test]
    fn hazard_ratio_formatting() {
        assert_eq!(format_hazard_ratio(2.0_f64.ln()), "2.000");
        assert_eq!(format_hazard_ratio(0.0), "1.000");
    }
}
