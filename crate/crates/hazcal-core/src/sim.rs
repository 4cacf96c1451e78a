//! Monte-Carlo laboratory: synthetic source/target cohorts, estimator
//! batteries, and bias / coverage metrics tables.
//!
//! Cohorts follow Weibull baselines `Lambda(t) = kappa (theta t)^nu` with two
//! covariates: binary `z1` and normal `z2` (the target side optionally shifts
//! the prevalence of `z1` and makes `z2 | z1` a conditional normal). Failure
//! times come from the inverse transform, censoring from a clamped normal,
//! and the observed time is rounded to the nearest integer. An optional
//! competing event follows its own proportional-hazards model on the same
//! covariates.
//!
//! Because recorded times are integers, an estimator queried at an integer
//! age `t` sees the survival of the *rounded* time, i.e. `P(T > t + 1/2)`.
//! Metrics therefore compare against the rounding-adjusted truth
//! `kappa (theta (t + 1/2))^nu`, which is what the generating parameters
//! induce in the summaries the estimators consume.
//!
//! Replicates run in a worker pool (see [`crate::par`]); each replicate owns
//! one RNG stream, so parallel and sequential runs are bit-identical.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, EventKind, SubjectRecord};
use crate::cox::{fit_cox, CoxFit, FitOptions};
use crate::el::{evaluate_constraints, solve_el_dual, ConstraintItem, ConstraintSpec, Given};
use crate::error::{Error, Result};
use crate::par::map_indexed;
use crate::recal::{self, RecalOptions, TargetSummary};
use crate::survival::{kaplan_meier, nelson_aalen_with_variance, CompetingTreatment};

/// Cumulative hazard `(theta t)^nu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullBaseline {
    pub theta: f64,
    pub nu: f64,
}

impl WeibullBaseline {
    pub fn cum_hazard(&self, t: f64) -> f64 {
        (self.theta * t).powf(self.nu)
    }

    /// Time at which the cumulative hazard reaches `lambda`.
    pub fn inverse(&self, lambda: f64) -> f64 {
        lambda.powf(1.0 / self.nu) / self.theta
    }
}

/// Target-side covariate distribution. The source always draws
/// `z1 ~ Bernoulli(1/2)`, `z2 ~ N(0, 1)` independently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateConfig {
    /// Same as the source.
    C1,
    /// `z1 ~ Bernoulli(0.8)`, `z2` unchanged and independent.
    C2,
    /// `z1 ~ Bernoulli(0.5)`, `z2 | z1=1 ~ N(0.5, 1.2)`, `z2 | z1=0 ~ N(-0.5, 0.8)`
    /// (second parameters are variances).
    C3,
    /// `z1 ~ Bernoulli(0.8)` with the C3 conditionals.
    C4,
    Custom {
        p1: f64,
        /// Conditional means of `z2` given `z1 = 0, 1`.
        mean_z2: [f64; 2],
        /// Conditional variances of `z2` given `z1 = 0, 1`.
        var_z2: [f64; 2],
    },
}

impl CovariateConfig {
    fn parameters(&self) -> (f64, [f64; 2], [f64; 2]) {
        match *self {
            Self::C1 => (0.5, [0.0, 0.0], [1.0, 1.0]),
            Self::C2 => (0.8, [0.0, 0.0], [1.0, 1.0]),
            Self::C3 => (0.5, [-0.5, 0.5], [0.8, 1.2]),
            Self::C4 => (0.8, [-0.5, 0.5], [0.8, 1.2]),
            Self::Custom { p1, mean_z2, var_z2 } => (p1, mean_z2, var_z2),
        }
    }

    /// Closed-form mixture moments `(E z1, E z2, E z2^2)`.
    pub fn analytic_moments(&self) -> (f64, f64, f64) {
        let (p1, mean, var) = self.parameters();
        let e_z2 = p1 * mean[1] + (1.0 - p1) * mean[0];
        let e_z2_sq =
            p1 * (var[1] + mean[1] * mean[1]) + (1.0 - p1) * (var[0] + mean[0] * mean[0]);
        (p1, e_z2, e_z2_sq)
    }

    pub fn parse(label: &str) -> Result<Self> {
        match label.to_ascii_uppercase().as_str() {
            "C1" => Ok(Self::C1),
            "C2" => Ok(Self::C2),
            "C3" => Ok(Self::C3),
            "C4" => Ok(Self::C4),
            other => Err(Error::InvalidInput(format!(
                "unknown covariate configuration {other:?}"
            ))),
        }
    }
}

/// Competing-event generator: `Lambda_c(t|Z) = kappa_c (theta t)^nu exp(beta_c' Z)`,
/// sharing the baseline shape with the event of interest, whose own baseline
/// is scaled by `kappa_event` in the same run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompetingConfig {
    pub kappa_event: f64,
    pub kappa_competing: f64,
    pub beta_c: Vec<f64>,
}

/// Which survival estimator the target summary uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurvivalEstimator {
    #[default]
    KaplanMeier,
    /// `exp(-Lambda_hat)` from the Nelson-Aalen estimator.
    NelsonAalen,
}

/// Source-baseline presets. The target baseline is always `(0.01, 2)`; the
/// presets vary the source shape and/or scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    A1,
    A2,
    A3,
    A4,
}

impl Scenario {
    pub fn source_baseline(self) -> WeibullBaseline {
        match self {
            Self::A1 => WeibullBaseline { theta: 0.01, nu: 2.0 },
            Self::A2 => WeibullBaseline { theta: 0.01, nu: 1.5 },
            Self::A3 => WeibullBaseline { theta: 0.008, nu: 2.0 },
            Self::A4 => WeibullBaseline { theta: 0.008, nu: 1.5 },
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        match label.to_ascii_uppercase().as_str() {
            "A1" => Ok(Self::A1),
            "A2" => Ok(Self::A2),
            "A3" => Ok(Self::A3),
            "A4" => Ok(Self::A4),
            other => Err(Error::InvalidInput(format!("unknown scenario {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub baseline_source: WeibullBaseline,
    pub baseline_target: WeibullBaseline,
    pub covariates: CovariateConfig,
    pub beta0: Vec<f64>,
    /// Source-cohort censoring location shift: `C* ~ N(40 + zeta z1, censor_sd^2)`.
    /// The target cohort's censoring is free of the shift (`zeta = 0`), which
    /// keeps its survival summary consistent; see `censor_zeta_target` to
    /// override.
    pub censor_zeta: f64,
    /// Censoring shift for the target cohort; 0 unless overridden.
    #[serde(default)]
    pub censor_zeta_target: f64,
    /// Censoring standard deviation. 15 by default: the evaluation ages reach
    /// 60, which requires censoring support well past 55.
    pub censor_sd: f64,
    pub n_source: usize,
    pub m_target: usize,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub competing: Option<CompetingConfig>,
    #[serde(default)]
    pub survival_estimator: SurvivalEstimator,
    /// Upper end of the integer grid for the cumulative-deviation metric.
    #[serde(default = "default_cad_tmax")]
    pub cad_tmax: u32,
}

fn default_cad_tmax() -> u32 {
    60
}

impl ScenarioConfig {
    /// The standard design: target baseline `(0.01, 2)`, hazard ratios
    /// `(2, 2)`, censoring `N(40 + zeta z1, 15)`.
    pub fn standard(
        scenario: Scenario,
        covariates: CovariateConfig,
        n_source: usize,
        m_target: usize,
        replicates: usize,
        seed: u64,
        censor_zeta: f64,
    ) -> Self {
        Self {
            baseline_source: scenario.source_baseline(),
            baseline_target: WeibullBaseline { theta: 0.01, nu: 2.0 },
            covariates,
            beta0: vec![2.0_f64.ln(), 2.0_f64.ln()],
            censor_zeta,
            censor_zeta_target: 0.0,
            censor_sd: 15.0,
            n_source,
            m_target,
            replicates,
            seed,
            competing: None,
            survival_estimator: SurvivalEstimator::KaplanMeier,
            cad_tmax: 60,
        }
    }

    /// True target-population cumulative baseline hazard at integer age `t`,
    /// adjusted for the half-unit shift induced by rounding recorded times
    /// to integers.
    pub fn target_truth(&self, t: f64) -> f64 {
        self.kappa_event() * self.baseline_target.cum_hazard(t + 0.5)
    }

    fn kappa_event(&self) -> f64 {
        self.competing.as_ref().map_or(1.0, |c| c.kappa_event)
    }
}

/// Which cohort to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Population {
    Source,
    Target,
}

/// Inverse-transform failure time for `Lambda(t|Z) = kappa (theta t)^nu e^eta`.
fn failure_time(baseline: WeibullBaseline, kappa: f64, eta: f64, u: f64) -> f64 {
    baseline.inverse(-u.ln() / (kappa * eta.exp()))
}

/// Draw one cohort. Observed *failure* times (event of interest or competing)
/// are rounded to the nearest integer; censored exits keep their exact time,
/// so censoring never shares a tie with the events it competes against.
/// Censoring times are clamped into `[1, 100]` before taking the minimum.
pub fn generate_cohort(config: &ScenarioConfig, which: Population, rng: &mut ChaCha8Rng) -> Cohort {
    let (p1, mean_z2, var_z2) = match which {
        Population::Source => CovariateConfig::C1.parameters(),
        Population::Target => config.covariates.parameters(),
    };
    let zeta = match which {
        Population::Source => config.censor_zeta,
        Population::Target => config.censor_zeta_target,
    };
    let baseline = match which {
        Population::Source => config.baseline_source,
        Population::Target => config.baseline_target,
    };
    let n = match which {
        Population::Source => config.n_source,
        Population::Target => config.m_target,
    };
    let censor_noise = Normal::new(0.0, config.censor_sd).expect("positive sd");
    let standard_normal = Normal::new(0.0, 1.0).unwrap();

    let mut subjects = Vec::with_capacity(n);
    for _ in 0..n {
        let z1 = f64::from(rng.random_bool(p1));
        let idx = z1 as usize;
        let z2 = mean_z2[idx] + var_z2[idx].sqrt() * standard_normal.sample(rng);
        let eta = config.beta0[0] * z1 + config.beta0[1] * z2;

        let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
        let t_event = failure_time(baseline, config.kappa_event(), eta, u);

        let t_competing = config.competing.as_ref().map(|c| {
            let eta_c = c.beta_c[0] * z1 + c.beta_c[1] * z2;
            let u_c: f64 = 1.0 - rng.random::<f64>();
            failure_time(baseline, c.kappa_competing, eta_c, u_c)
        });

        let c_star = 40.0 + zeta * z1 + censor_noise.sample(rng);
        let c_time = c_star.clamp(1.0, 100.0);

        let mut x = t_event;
        let mut event = EventKind::EventOfInterest;
        if let Some(tc) = t_competing {
            if tc < x {
                x = tc;
                event = EventKind::Competing;
            }
        }
        if c_time < x {
            x = c_time;
            event = EventKind::Censored;
        }
        let exit = if event == EventKind::Censored { x } else { x.round() };
        subjects.push(SubjectRecord::new(0.0, exit, event, vec![z1, z2]));
    }
    Cohort::new(subjects, vec!["z1".into(), "z2".into()]).expect("generated cohort is valid")
}

/// The four nested constraint sets used by the weighted estimators:
/// means, plus the second moment of `z2`, plus conditional moments of `z2`
/// given `z1`.
pub fn standard_constraint_items(k: usize) -> Vec<ConstraintItem> {
    match k {
        1 => vec![ConstraintItem::RawMoment { j: 1 }],
        2 => vec![
            ConstraintItem::RawMoment { j: 1 },
            ConstraintItem::RawMoment { j: 2 },
        ],
        3 => vec![
            ConstraintItem::RawMoment { j: 1 },
            ConstraintItem::RawMoment { j: 2 },
            ConstraintItem::SecondMoment { j: 2 },
        ],
        4 => vec![
            ConstraintItem::RawMoment { j: 1 },
            ConstraintItem::ConditionalMoment {
                j: 2,
                given: Given { k: 1, value: 1.0 },
            },
            ConstraintItem::ConditionalSecondMoment {
                j: 2,
                given: Given { k: 1, value: 1.0 },
            },
            ConstraintItem::ConditionalMoment {
                j: 2,
                given: Given { k: 1, value: 0.0 },
            },
            ConstraintItem::ConditionalSecondMoment {
                j: 2,
                given: Given { k: 1, value: 0.0 },
            },
        ],
        other => panic!("constraint set index must be 1..=4, got {other}"),
    }
}

/// Build the target summary: survival curve (with variances and cross-time
/// covariances) plus sample moments for the requested constraint rows.
pub fn summarize_target(
    cohort: &Cohort,
    times: &[f64],
    constraint_items: Option<&[ConstraintItem]>,
    estimator: SurvivalEstimator,
) -> Result<TargetSummary> {
    let max_exit = cohort
        .subjects
        .iter()
        .map(|s| s.exit_age)
        .fold(f64::NEG_INFINITY, f64::max);
    for &t in times {
        if t > max_exit {
            return Err(Error::EmptyRiskSet { time: t });
        }
    }

    let s = times.len();
    let (survival, variance, covariance): (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) = match estimator {
        SurvivalEstimator::KaplanMeier => {
            let km = kaplan_meier(cohort, CompetingTreatment::Censored)?;
            let surv: Vec<f64> = times.iter().map(|&t| km.survival_at(t)).collect();
            let var: Vec<f64> = times.iter().map(|&t| km.variance_at(t)).collect();
            let cov: Vec<Vec<f64>> = (0..s)
                .map(|a| (0..s).map(|b| km.covariance(times[a], times[b])).collect())
                .collect();
            (surv, var, cov)
        }
        SurvivalEstimator::NelsonAalen => {
            let (na, na_var) = nelson_aalen_with_variance(cohort)?;
            let surv: Vec<f64> = times.iter().map(|&t| (-na.value_at(t)).exp()).collect();
            // Delta method: cov(S(a), S(b)) = S(a) S(b) var(Lam(min)).
            let cov: Vec<Vec<f64>> = (0..s)
                .map(|a| {
                    (0..s)
                        .map(|b| surv[a] * surv[b] * na_var.value_at(times[a].min(times[b])))
                        .collect()
                })
                .collect();
            let var: Vec<f64> = (0..s).map(|k| cov[k][k]).collect();
            (surv, var, cov)
        }
    };
    for (&t, &sv) in times.iter().zip(&survival) {
        if sv <= 0.0 {
            return Err(Error::InvalidSurvival { time: t, value: sv });
        }
    }

    let constraints = match constraint_items {
        None => None,
        Some(items) => {
            let probe = ConstraintSpec {
                items: items.to_vec(),
                targets: vec![0.0; items.len()],
                target_variances: vec![],
                target_covariance: None,
                m: cohort.n() as u64,
            };
            let h = evaluate_constraints(cohort, &probe)?;
            let m = cohort.n() as f64;
            let q = items.len();
            let targets: Vec<f64> = (0..q).map(|j| h.column(j).sum() / m).collect();
            let mut cov = vec![vec![0.0; q]; q];
            for a in 0..q {
                for b in a..q {
                    let mut acc = 0.0;
                    for i in 0..cohort.n() {
                        acc += (h[(i, a)] - targets[a]) * (h[(i, b)] - targets[b]);
                    }
                    // Sample covariance of the mean estimator.
                    let v = acc / (m - 1.0) / m;
                    cov[a][b] = v;
                    cov[b][a] = v;
                }
            }
            Some(ConstraintSpec {
                items: items.to_vec(),
                targets,
                target_variances: (0..q).map(|j| cov[j][j]).collect(),
                target_covariance: Some(cov),
                m: cohort.n() as u64,
            })
        }
    };

    Ok(TargetSummary {
        times: times.to_vec(),
        survival,
        survival_variance: variance,
        survival_covariance: Some(covariance),
        constraints,
        m: cohort.n() as u64,
        mu_s_covariance: None,
    })
}

/// The estimators compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EstimatorKind {
    Breslow,
    Unweighted,
    /// Weighted with constraint set `1..=4`.
    Weighted(usize),
}

impl EstimatorKind {
    pub fn label(&self) -> String {
        match self {
            Self::Breslow => "breslow".into(),
            Self::Unweighted => "unweighted".into(),
            Self::Weighted(k) => format!("weighted_{k}"),
        }
    }

    pub fn all() -> Vec<Self> {
        vec![
            Self::Breslow,
            Self::Unweighted,
            Self::Weighted(1),
            Self::Weighted(2),
            Self::Weighted(3),
            Self::Weighted(4),
        ]
    }
}

/// One metrics-table row: one estimator at one evaluation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub estimator: String,
    pub time: f64,
    pub truth: f64,
    /// Mean relative bias, percent.
    pub pbias: f64,
    /// Empirical SD of the estimates (absent with fewer than 2 replicates).
    pub esd: Option<f64>,
    /// Mean asymptotic standard error.
    pub ase: f64,
    /// Root mean squared error.
    pub smse: f64,
    /// Coverage of the nominal 95% interval, percent.
    pub cp: f64,
    /// Mean cumulative absolute deviation over the integer grid.
    pub cad: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioTable {
    pub rows: Vec<MetricsRow>,
    pub replicates_used: BTreeMap<String, usize>,
    pub failures: BTreeMap<String, usize>,
}

impl ScenarioTable {
    pub fn row(&self, estimator: &str, time: f64) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.time == time)
    }

    pub fn to_csv_writer<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record([
            "estimator", "time", "truth", "pbias", "esd", "ase", "smse", "cp", "cad",
        ])
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
        for r in &self.rows {
            wtr.write_record([
                r.estimator.clone(),
                format!("{}", r.time),
                format!("{}", r.truth),
                format!("{}", r.pbias),
                r.esd.map(|v| format!("{v}")).unwrap_or_default(),
                format!("{}", r.ase),
                format!("{}", r.smse),
                format!("{}", r.cp),
                format!("{}", r.cad),
            ])
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Point estimate, standard error, and 95% interval at one time.
#[derive(Debug, Clone, Copy)]
struct PointEstimate {
    estimate: f64,
    se: f64,
    lo: f64,
    hi: f64,
}

#[derive(Debug, Clone)]
struct EstimatorOutcome {
    points: Vec<PointEstimate>,
    cad: f64,
}

#[derive(Debug)]
struct ReplicateOutcome {
    per_estimator: Vec<(EstimatorKind, Result<EstimatorOutcome>)>,
    observed_event_fraction: f64,
    observed_competing_fraction: f64,
}

const Z975: f64 = 1.959963984540054;

fn point_from(lam: f64, se: f64) -> PointEstimate {
    PointEstimate {
        estimate: lam,
        se,
        lo: (lam - Z975 * se).max(0.0),
        hi: lam + Z975 * se,
    }
}

fn run_replicate(
    config: &ScenarioConfig,
    replicate: usize,
    eval_times: &[f64],
    estimators: &[EstimatorKind],
    with_cad: bool,
) -> Result<ReplicateOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1 + replicate as u64);

    let source = generate_cohort(config, Population::Source, &mut rng);
    let target = generate_cohort(config, Population::Target, &mut rng);
    let fit = fit_cox(&source, &FitOptions::default())?;

    let n_t = target.n() as f64;
    let observed_event_fraction = target
        .subjects
        .iter()
        .filter(|s| s.event == EventKind::EventOfInterest)
        .count() as f64
        / n_t;
    let observed_competing_fraction = target
        .subjects
        .iter()
        .filter(|s| s.event == EventKind::Competing)
        .count() as f64
        / n_t;

    // Solve on the union of the evaluation times and the integer CAD grid;
    // pointwise inference only at the evaluation times.
    let mut all_times: Vec<f64> = eval_times.to_vec();
    if with_cad {
        for t in 1..=config.cad_tmax {
            let t = f64::from(t);
            if !all_times.contains(&t) {
                all_times.push(t);
            }
        }
    }
    all_times.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let base_summary = summarize_target(&target, &all_times, None, config.survival_estimator)?;
    let eval_summary = summarize_target(&target, eval_times, None, config.survival_estimator)?;

    let options = RecalOptions::default();
    let per_estimator = estimators
        .iter()
        .map(|&kind| {
            let outcome = run_estimator(
                kind,
                config,
                &source,
                &target,
                &fit,
                &base_summary,
                &eval_summary,
                &all_times,
                eval_times,
                &options,
            );
            (kind, outcome)
        })
        .collect();

    Ok(ReplicateOutcome {
        per_estimator,
        observed_event_fraction,
        observed_competing_fraction,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_estimator(
    kind: EstimatorKind,
    config: &ScenarioConfig,
    source: &Cohort,
    target: &Cohort,
    fit: &CoxFit,
    base_summary: &TargetSummary,
    eval_summary: &TargetSummary,
    all_times: &[f64],
    eval_times: &[f64],
    options: &RecalOptions,
) -> Result<EstimatorOutcome> {
    let beta = fit.beta_hat.as_slice();
    match kind {
        EstimatorKind::Breslow => {
            let points = eval_times
                .iter()
                .map(|&t| {
                    let estimate = fit.breslow_baseline.value_at(t);
                    Ok(point_from(estimate, fit.baseline_variance(t)?.max(0.0).sqrt()))
                })
                .collect::<Result<_>>()?;
            let cad = integer_grid(config, all_times)
                .map(|t| (fit.breslow_baseline.value_at(t) - config.target_truth(t)).abs())
                .sum();
            Ok(EstimatorOutcome { points, cad })
        }
        EstimatorKind::Unweighted => {
            let mut points = Vec::with_capacity(eval_times.len());
            for k in 0..eval_times.len() {
                let lam =
                    recal::solve_unweighted(source, beta, eval_summary.survival[k], options.root_tol)?;
                let sigma_sq = recal::variance_unweighted(source, fit, eval_summary, lam, k)?;
                points.push(point_from(lam, (sigma_sq.max(0.0) / source.n() as f64).sqrt()));
            }
            let cad = cad_sum(config, source, beta, base_summary, all_times, None)?;
            Ok(EstimatorOutcome { points, cad })
        }
        EstimatorKind::Weighted(set) => {
            let items = standard_constraint_items(set);
            let summary_k = summarize_target(
                target,
                eval_times,
                Some(&items),
                config.survival_estimator,
            )?;
            let spec = summary_k.constraints.as_ref().expect("constraints attached");
            let h = evaluate_constraints(source, spec)?;
            let el = solve_el_dual(&h, &spec.targets, options.el_tol, options.el_max_iter)?;

            let mut points = Vec::with_capacity(eval_times.len());
            for k in 0..eval_times.len() {
                let lam = recal::solve_weighted(
                    source,
                    beta,
                    summary_k.survival[k],
                    &el.weights,
                    options.root_tol,
                )?;
                let sigma_sq =
                    recal::variance_weighted(source, fit, &summary_k, lam, &el, k, true)?;
                points.push(point_from(lam, (sigma_sq.max(0.0) / source.n() as f64).sqrt()));
            }
            let cad = cad_sum(config, source, beta, base_summary, all_times, Some(&el.weights))?;
            Ok(EstimatorOutcome { points, cad })
        }
    }
}

fn integer_grid<'a>(
    config: &'a ScenarioConfig,
    all_times: &'a [f64],
) -> impl Iterator<Item = f64> + 'a {
    all_times
        .iter()
        .copied()
        .filter(|t| t.fract() == 0.0 && *t >= 1.0 && *t <= f64::from(config.cad_tmax))
}

fn cad_sum(
    config: &ScenarioConfig,
    source: &Cohort,
    beta: &[f64],
    base_summary: &TargetSummary,
    all_times: &[f64],
    weights: Option<&[f64]>,
) -> Result<f64> {
    let mut acc = 0.0;
    for (idx, &t) in all_times.iter().enumerate() {
        if t.fract() != 0.0 || t < 1.0 || t > f64::from(config.cad_tmax) {
            continue;
        }
        let s_t = base_summary.survival[idx];
        let lam = match weights {
            Some(w) => recal::solve_weighted(source, beta, s_t, w, 1e-12)?,
            None => recal::solve_unweighted(source, beta, s_t, 1e-12)?,
        };
        acc += (lam - config.target_truth(t)).abs();
    }
    Ok(acc)
}

/// Run the full estimator battery over all replicates and aggregate the
/// metrics table.
pub fn run_scenario(config: &ScenarioConfig, eval_times: &[f64]) -> Result<ScenarioTable> {
    run_scenario_with(config, eval_times, &EstimatorKind::all(), true, false)
}

/// Sequential twin of [`run_scenario`]; same output bit for bit.
pub fn run_scenario_sequential(
    config: &ScenarioConfig,
    eval_times: &[f64],
) -> Result<ScenarioTable> {
    run_scenario_with(config, eval_times, &EstimatorKind::all(), true, true)
}

fn run_scenario_with(
    config: &ScenarioConfig,
    eval_times: &[f64],
    estimators: &[EstimatorKind],
    with_cad: bool,
    force_sequential: bool,
) -> Result<ScenarioTable> {
    if config.replicates == 0 {
        return Err(Error::InvalidInput("replicates must be >= 1".into()));
    }
    let runner = |r: usize| run_replicate(config, r, eval_times, estimators, with_cad);
    let outcomes: Vec<Result<ReplicateOutcome>> = if force_sequential {
        crate::par::map_indexed_sequential(config.replicates, runner)
    } else {
        map_indexed(config.replicates, runner)
    };
    aggregate(config, eval_times, estimators, outcomes)
}

fn aggregate(
    config: &ScenarioConfig,
    eval_times: &[f64],
    estimators: &[EstimatorKind],
    outcomes: Vec<Result<ReplicateOutcome>>,
) -> Result<ScenarioTable> {
    let total = outcomes.len();
    let mut failures: BTreeMap<String, usize> = BTreeMap::new();
    let mut whole_failures = 0usize;
    let mut per_estimator: BTreeMap<String, Vec<&EstimatorOutcome>> = BTreeMap::new();

    let kept: Vec<&ReplicateOutcome> = outcomes
        .iter()
        .filter_map(|r| match r {
            Ok(o) => Some(o),
            Err(_) => {
                whole_failures += 1;
                None
            }
        })
        .collect();
    if whole_failures > 0 {
        failures.insert("replicate".into(), whole_failures);
    }
    for outcome in &kept {
        for (kind, res) in &outcome.per_estimator {
            match res {
                Ok(est) => per_estimator.entry(kind.label()).or_default().push(est),
                Err(_) => *failures.entry(kind.label()).or_default() += 1,
            }
        }
    }

    // Failures beyond 1% of replicates invalidate the run.
    let limit = ((total as f64) * 0.01).ceil() as usize;
    for kind in estimators {
        let lost = whole_failures + failures.get(&kind.label()).copied().unwrap_or(0);
        if lost > limit.max(1) {
            return Err(Error::ReplicateFailures {
                failed: lost,
                total,
                context: kind.label(),
            });
        }
    }

    let mut rows = Vec::new();
    let mut replicates_used = BTreeMap::new();
    for kind in estimators {
        let label = kind.label();
        let Some(outcomes) = per_estimator.get(&label) else {
            replicates_used.insert(label, 0);
            continue;
        };
        replicates_used.insert(label.clone(), outcomes.len());
        let reps = outcomes.len() as f64;
        let cad = outcomes.iter().map(|o| o.cad).sum::<f64>() / reps;
        for (k, &t) in eval_times.iter().enumerate() {
            let truth = config.target_truth(t);
            let estimates: Vec<f64> = outcomes.iter().map(|o| o.points[k].estimate).collect();
            let mean = estimates.iter().sum::<f64>() / reps;
            let esd = if estimates.len() >= 2 {
                let var =
                    estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (reps - 1.0);
                Some(var.sqrt())
            } else {
                None
            };
            let ase = outcomes.iter().map(|o| o.points[k].se).sum::<f64>() / reps;
            let smse =
                (estimates.iter().map(|e| (e - truth) * (e - truth)).sum::<f64>() / reps).sqrt();
            let covered = outcomes
                .iter()
                .filter(|o| o.points[k].lo <= truth && truth <= o.points[k].hi)
                .count() as f64;
            rows.push(MetricsRow {
                estimator: label.clone(),
                time: t,
                truth,
                pbias: (mean - truth) / truth * 100.0,
                esd,
                ase,
                smse,
                cp: covered / reps * 100.0,
                cad,
            });
        }
    }

    Ok(ScenarioTable {
        rows,
        replicates_used,
        failures,
    })
}

/// One cell of the competing-risk sensitivity grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContourRow {
    pub kappa_event: f64,
    pub kappa_competing: f64,
    /// Magnitude of the correlation between the event-of-interest risk score
    /// and the competing-event time (empirical, uncensored draw).
    pub corr: f64,
    /// Probability of observing the event of interest in the target cohort.
    pub p_event: f64,
    /// Competing-event vs event-of-interest observation-probability ratio.
    pub ratio: f64,
    /// Max over the evaluation times of |PBias| of the richest weighted
    /// estimator, percent.
    pub max_pbias: f64,
    /// Min over the evaluation times of its coverage, percent.
    pub min_cp: f64,
}

pub fn contour_to_csv_writer<W: std::io::Write>(rows: &[ContourRow], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["p_event", "ratio", "corr", "max_pbias", "min_cp", "kappa_event", "kappa_competing"])
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    for r in rows {
        wtr.write_record([
            format!("{}", r.p_event),
            format!("{}", r.ratio),
            format!("{}", r.corr),
            format!("{}", r.max_pbias),
            format!("{}", r.min_cp),
            format!("{}", r.kappa_event),
            format!("{}", r.kappa_competing),
        ])
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Sweep `kappa_event x kappa_competing` for a fixed covariate association
/// `beta_c`, reporting the bias/coverage envelope of the weighted estimator
/// with the full constraint set.
pub fn run_competing_contour(
    base: &ScenarioConfig,
    kappa_events: &[f64],
    kappa_competings: &[f64],
    beta_c: &[f64],
    eval_times: &[f64],
) -> Result<Vec<ContourRow>> {
    let mut rows = Vec::new();
    for &ke in kappa_events {
        for &kc in kappa_competings {
            let mut config = base.clone();
            config.competing = Some(CompetingConfig {
                kappa_event: ke,
                kappa_competing: kc,
                beta_c: beta_c.to_vec(),
            });
            let corr = risk_score_competing_correlation(&config);

            let estimators = [EstimatorKind::Weighted(4)];
            let outcomes: Vec<Result<ReplicateOutcome>> = map_indexed(config.replicates, |r| {
                run_replicate(&config, r, eval_times, &estimators, false)
            });
            let mut p_event_acc = 0.0;
            let mut p_comp_acc = 0.0;
            let mut count = 0.0;
            for o in outcomes.iter().flatten() {
                p_event_acc += o.observed_event_fraction;
                p_comp_acc += o.observed_competing_fraction;
                count += 1.0;
            }
            let table = aggregate(&config, eval_times, &estimators, outcomes)?;
            let label = EstimatorKind::Weighted(4).label();
            let mut max_pbias = 0.0_f64;
            let mut min_cp = 100.0_f64;
            for &t in eval_times {
                let row = table
                    .row(&label, t)
                    .ok_or_else(|| Error::InvalidInput("missing contour cell".into()))?;
                max_pbias = max_pbias.max(row.pbias.abs());
                min_cp = min_cp.min(row.cp);
            }
            let p_event = p_event_acc / count;
            rows.push(ContourRow {
                kappa_event: ke,
                kappa_competing: kc,
                corr,
                p_event,
                ratio: p_comp_acc / count / p_event,
                max_pbias,
                min_cp,
            });
        }
    }
    Ok(rows)
}

/// Empirical |corr(beta' Z, T_c)| from a dedicated uncensored draw.
fn risk_score_competing_correlation(config: &ScenarioConfig) -> f64 {
    let Some(comp) = &config.competing else {
        return 0.0;
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    let n = 20_000;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut scores = Vec::with_capacity(n);
    let mut times = Vec::with_capacity(n);
    for _ in 0..n {
        let z1 = f64::from(rng.random_bool(0.5));
        let z2: f64 = normal.sample(&mut rng);
        let eta = config.beta0[0] * z1 + config.beta0[1] * z2;
        let eta_c = comp.beta_c[0] * z1 + comp.beta_c[1] * z2;
        let u: f64 = 1.0 - rng.random::<f64>();
        scores.push(eta);
        times.push(failure_time(config.baseline_target, comp.kappa_competing, eta_c, u));
    }
    let nf = n as f64;
    let mean_s = scores.iter().sum::<f64>() / nf;
    let mean_t = times.iter().sum::<f64>() / nf;
    let mut cov = 0.0;
    let mut var_s = 0.0;
    let mut var_t = 0.0;
    for i in 0..n {
        let ds = scores[i] - mean_s;
        let dt = times[i] - mean_t;
        cov += ds * dt;
        var_s += ds * ds;
        var_t += dt * dt;
    }
    (cov / (var_s * var_t).sqrt()).abs()
}
