//! Cox proportional-hazards regression by maximum partial likelihood.
//!
//! Newton-Raphson on the log partial likelihood with Breslow tie handling and
//! a monotone step-halving safeguard. The fit carries the coefficient
//! covariance `I(beta)^-1`, the Breslow cumulative baseline hazard, and a
//! delta-method variance for the baseline that accounts for the uncertainty
//! in the coefficients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cohort::{dot, Cohort, EventKind};
use crate::error::{Error, Result};
use crate::stepfn::StepFunction;

/// Condition-number threshold beyond which the information matrix is treated
/// as collinear rather than silently pseudo-inverted.
const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Starting value for beta; zero vector when absent.
    pub init_beta: Option<Vec<f64>>,
    /// Convergence tolerance on the max-abs component of the score.
    pub tol: f64,
    /// Maximum Newton iterations. Zero means "evaluate only": the baseline,
    /// information, and likelihood are computed at `init_beta` without any
    /// update (and without a convergence check).
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            init_beta: None,
            tol: 1e-8,
            max_iter: 50,
        }
    }
}

/// A fitted Cox model.
///
/// Serializes to a flat JSON document: `beta` (array), `sigma_beta`
/// (row-major array), `baseline` (knots/values/pre_value), and
/// `covariate_names`, plus the fit diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "CoxFitJson", into = "CoxFitJson")]
pub struct CoxFit {
    /// Maximum partial-likelihood estimate of the log hazard ratios.
    pub beta_hat: DVector<f64>,
    /// Estimated covariance of `beta_hat`, `I(beta_hat)^-1`.
    pub sigma_beta: DMatrix<f64>,
    /// Breslow cumulative baseline hazard.
    pub breslow_baseline: StepFunction,
    pub log_partial_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub covariate_names: Vec<String>,
    /// Per-event-time pieces needed by the baseline variance:
    /// `(time, d_u, n H0(u), Zbar(u))`.
    baseline_terms: Vec<BaselineTerm>,
}

/// On-disk shape of a fitted model.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CoxFitJson {
    beta: Vec<f64>,
    /// Row-major `p x p` covariance of `beta`.
    sigma_beta: Vec<f64>,
    baseline: StepFunction,
    covariate_names: Vec<String>,
    log_partial_likelihood: f64,
    iterations: usize,
    converged: bool,
}

impl From<CoxFit> for CoxFitJson {
    fn from(fit: CoxFit) -> Self {
        let p = fit.beta_hat.len();
        let mut sigma = Vec::with_capacity(p * p);
        for i in 0..p {
            for j in 0..p {
                sigma.push(fit.sigma_beta[(i, j)]);
            }
        }
        Self {
            beta: fit.beta_hat.iter().copied().collect(),
            sigma_beta: sigma,
            baseline: fit.breslow_baseline,
            covariate_names: fit.covariate_names,
            log_partial_likelihood: fit.log_partial_likelihood,
            iterations: fit.iterations,
            converged: fit.converged,
        }
    }
}

impl TryFrom<CoxFitJson> for CoxFit {
    type Error = Error;

    fn try_from(json: CoxFitJson) -> Result<Self> {
        let p = json.beta.len();
        if json.sigma_beta.len() != p * p {
            return Err(Error::DimensionMismatch(format!(
                "sigma_beta has {} entries, expected {}",
                json.sigma_beta.len(),
                p * p
            )));
        }
        if json.covariate_names.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "{} covariate names for {} coefficients",
                json.covariate_names.len(),
                p
            )));
        }
        Ok(Self {
            beta_hat: DVector::from_vec(json.beta),
            sigma_beta: DMatrix::from_fn(p, p, |i, j| json.sigma_beta[i * p + j]),
            breslow_baseline: json.baseline,
            covariate_names: json.covariate_names,
            log_partial_likelihood: json.log_partial_likelihood,
            iterations: json.iterations,
            converged: json.converged,
            baseline_terms: Vec::new(),
        })
    }
}

#[derive(Debug, Clone)]
struct BaselineTerm {
    time: f64,
    deaths: f64,
    risk_weight: f64, // sum over the risk set of exp(beta' Z)
    zbar: DVector<f64>,
}

impl CoxFit {
    /// Delta-method variance of the Breslow baseline at `t`:
    /// the martingale term `sum_{u<=t} d_u / (sum_R e^{beta'Z})^2` plus the
    /// quadratic form of `d Lambda/d beta` against `sigma_beta`.
    ///
    /// A deserialized fit must call [`CoxFit::rebuild_baseline_terms`] first.
    pub fn baseline_variance(&self, t: f64) -> Result<f64> {
        if self.baseline_terms.is_empty() && !self.breslow_baseline.is_empty() {
            return Err(Error::InvalidInput(
                "baseline variance needs per-event terms; call rebuild_baseline_terms after deserializing".into(),
            ));
        }
        let p = self.beta_hat.len();
        let mut mart = 0.0;
        let mut grad = DVector::zeros(p);
        for term in &self.baseline_terms {
            if term.time > t {
                break;
            }
            mart += term.deaths / (term.risk_weight * term.risk_weight);
            grad -= &term.zbar * (term.deaths / term.risk_weight);
        }
        Ok(mart + (grad.transpose() * &self.sigma_beta * &grad)[(0, 0)])
    }

    /// Hazard ratios `exp(beta_hat)`.
    pub fn hazard_ratios(&self) -> Vec<f64> {
        self.beta_hat.iter().map(|b| b.exp()).collect()
    }

    /// Rebuild the non-serialized baseline terms from a cohort. Needed after
    /// deserializing a fit when baseline variances are required.
    pub fn rebuild_baseline_terms(&mut self, cohort: &Cohort) -> Result<()> {
        let state = CoxState::new(cohort)?;
        let parts = state.evaluate(self.beta_hat.as_slice());
        self.baseline_terms = parts.baseline_terms;
        Ok(())
    }
}

/// Everything `evaluate` produces at one beta.
struct Evaluated {
    log_lik: f64,
    score: DVector<f64>,
    information: DMatrix<f64>,
    baseline_terms: Vec<BaselineTerm>,
}

/// Sorted views of the cohort shared across Newton iterations.
struct CoxState<'a> {
    cohort: &'a Cohort,
    /// Subject indices sorted by entry age.
    by_entry: Vec<usize>,
    /// Subject indices sorted by exit age.
    by_exit: Vec<usize>,
    /// Distinct event times (ascending) with the subjects failing there.
    event_groups: Vec<(f64, Vec<usize>)>,
}

impl<'a> CoxState<'a> {
    fn new(cohort: &'a Cohort) -> Result<Self> {
        let n = cohort.n();
        let mut by_entry: Vec<usize> = (0..n).collect();
        by_entry.sort_by(|&a, &b| {
            cohort.subjects[a]
                .entry_age
                .partial_cmp(&cohort.subjects[b].entry_age)
                .unwrap()
        });
        let mut by_exit: Vec<usize> = (0..n).collect();
        by_exit.sort_by(|&a, &b| {
            cohort.subjects[a]
                .exit_age
                .partial_cmp(&cohort.subjects[b].exit_age)
                .unwrap()
        });

        let mut failures: Vec<usize> = (0..n)
            .filter(|&i| {
                let s = &cohort.subjects[i];
                s.event == EventKind::EventOfInterest && s.entry_age < s.exit_age
            })
            .collect();
        if failures.is_empty() {
            return Err(Error::NoEvents);
        }
        failures.sort_by(|&a, &b| {
            cohort.subjects[a]
                .exit_age
                .partial_cmp(&cohort.subjects[b].exit_age)
                .unwrap()
        });
        let mut event_groups: Vec<(f64, Vec<usize>)> = Vec::new();
        for i in failures {
            let t = cohort.subjects[i].exit_age;
            match event_groups.last_mut() {
                Some((u, members)) if *u == t => members.push(i),
                _ => event_groups.push((t, vec![i])),
            }
        }
        Ok(Self {
            cohort,
            by_entry,
            by_exit,
            event_groups,
        })
    }

    /// One sweep over event times maintaining risk-set sums of
    /// `(e^{bz}, Z e^{bz}, Z Z' e^{bz})` via add-on-entry / remove-on-exit.
    /// The running sums use Neumaier compensation: uncompensated add/remove
    /// accumulates enough round-off to put a noise floor above the score
    /// tolerance on cohorts with a few hundred events.
    fn evaluate(&self, beta: &[f64]) -> Evaluated {
        let p = beta.len();
        let subjects = &self.cohort.subjects;
        let eta: Vec<f64> = subjects
            .iter()
            .map(|s| dot(beta, &s.covariates))
            .collect();

        let width = 1 + p + p * p;
        let mut sums = vec![0.0_f64; width];
        let mut comps = vec![0.0_f64; width];
        let kahan_add = |slot: usize, value: f64, sums: &mut [f64], comps: &mut [f64]| {
            let t = sums[slot] + value;
            comps[slot] += if sums[slot].abs() >= value.abs() {
                (sums[slot] - t) + value
            } else {
                (value - t) + sums[slot]
            };
            sums[slot] = t;
        };
        let add = |i: usize, sign: f64, sums: &mut [f64], comps: &mut [f64]| {
            let w = sign * eta[i].exp();
            let z = &subjects[i].covariates;
            kahan_add(0, w, sums, comps);
            for j in 0..p {
                kahan_add(1 + j, w * z[j], sums, comps);
                for k in 0..p {
                    kahan_add(1 + p + j * p + k, w * z[j] * z[k], sums, comps);
                }
            }
        };

        let mut log_lik = 0.0;
        let mut score = DVector::zeros(p);
        let mut information = DMatrix::zeros(p, p);
        let mut baseline_terms = Vec::with_capacity(self.event_groups.len());

        let mut enter = 0; // next index into by_entry with entry_age < u
        let mut leave = 0; // next index into by_exit with exit_age < u
        for (u, members) in &self.event_groups {
            while enter < self.by_entry.len() && subjects[self.by_entry[enter]].entry_age < *u {
                add(self.by_entry[enter], 1.0, &mut sums, &mut comps);
                enter += 1;
            }
            while leave < self.by_exit.len() && subjects[self.by_exit[leave]].exit_age < *u {
                add(self.by_exit[leave], -1.0, &mut sums, &mut comps);
                leave += 1;
            }
            let s0 = sums[0] + comps[0];
            let s1 = DVector::from_fn(p, |j, _| sums[1 + j] + comps[1 + j]);
            let s2 = DMatrix::from_fn(p, p, |j, k| {
                sums[1 + p + j * p + k] + comps[1 + p + j * p + k]
            });

            let d = members.len() as f64;
            let zbar = &s1 / s0;
            for &i in members {
                log_lik += eta[i];
                for j in 0..p {
                    score[j] += subjects[i].covariates[j];
                }
            }
            log_lik -= d * s0.ln();
            score -= &zbar * d;
            // d * (S2/S0 - zbar zbar')
            for j in 0..p {
                for k in 0..p {
                    information[(j, k)] += d * (s2[(j, k)] / s0 - zbar[j] * zbar[k]);
                }
            }
            baseline_terms.push(BaselineTerm {
                time: *u,
                deaths: d,
                risk_weight: s0,
                zbar,
            });
        }

        Evaluated {
            log_lik,
            score,
            information,
            baseline_terms,
        }
    }
}

/// Analytic score vector and observed information at `beta`.
pub fn score_and_information(cohort: &Cohort, beta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_beta(cohort, beta)?;
    let state = CoxState::new(cohort)?;
    let ev = state.evaluate(beta);
    Ok((ev.score, ev.information))
}

/// Log partial likelihood (Breslow tie convention) at `beta`.
pub fn log_partial_likelihood(cohort: &Cohort, beta: &[f64]) -> Result<f64> {
    check_beta(cohort, beta)?;
    let state = CoxState::new(cohort)?;
    Ok(state.evaluate(beta).log_lik)
}

fn check_beta(cohort: &Cohort, beta: &[f64]) -> Result<()> {
    if beta.len() != cohort.p() {
        return Err(Error::DimensionMismatch(format!(
            "beta has length {}, expected {}",
            beta.len(),
            cohort.p()
        )));
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::InvalidInput("beta must be finite".into()));
    }
    Ok(())
}

/// Checked solve of `I x = b` with a condition-number guard.
fn solve_information(info: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let eig = info.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let min_ev = eig
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b.abs()));
    if max_ev.is_nan() || max_ev <= 0.0 || min_ev * CONDITION_LIMIT < max_ev {
        return Err(Error::SingularInformation(format!(
            "condition number {:.3e} exceeds {CONDITION_LIMIT:.0e} (covariates collinear?)",
            if min_ev > 0.0 { max_ev / min_ev } else { f64::INFINITY }
        )));
    }
    Ok(info
        .clone()
        .lu()
        .solve(rhs)
        .expect("well-conditioned matrix must solve"))
}

fn invert_information(info: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = info.nrows();
    let mut inv = DMatrix::zeros(p, p);
    for j in 0..p {
        let mut e = DVector::zeros(p);
        e[j] = 1.0;
        let col = solve_information(info, &e)?;
        inv.set_column(j, &col);
    }
    // symmetrize against round-off
    let invt = inv.transpose();
    Ok((inv + invt) * 0.5)
}

/// Fit the Cox model. See [`FitOptions`] for the evaluate-only mode.
pub fn fit_cox(cohort: &Cohort, options: &FitOptions) -> Result<CoxFit> {
    let p = cohort.p();
    let mut beta: Vec<f64> = match &options.init_beta {
        Some(b) => {
            check_beta(cohort, b)?;
            b.clone()
        }
        None => vec![0.0; p],
    };
    let state = CoxState::new(cohort)?;

    let mut ev = state.evaluate(&beta);
    let mut iterations = 0;
    let mut converged = false;

    if options.max_iter > 0 {
        for _ in 0..options.max_iter {
            let score_norm = ev.score.amax();
            if score_norm < options.tol {
                converged = true;
                break;
            }
            iterations += 1;
            let delta = solve_information(&ev.information, &ev.score)?;
            // A Newton step at rounding scale means the score residual is
            // numerical noise; accept the iterate.
            let beta_scale = 1.0 + beta.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
            if delta.amax() < 1e-11 * beta_scale {
                converged = true;
                break;
            }

            // Halve the step until the log partial likelihood does not decrease.
            let mut step = 1.0;
            loop {
                let candidate: Vec<f64> = beta
                    .iter()
                    .zip(delta.iter())
                    .map(|(b, d)| b + step * d)
                    .collect();
                let cand_ev = state.evaluate(&candidate);
                if cand_ev.log_lik >= ev.log_lik - 1e-12 || step < 1e-8 {
                    beta = candidate;
                    ev = cand_ev;
                    break;
                }
                step *= 0.5;
            }
        }
        if !converged {
            let score_norm = ev.score.amax();
            if score_norm < options.tol {
                converged = true;
            } else {
                return Err(Error::CoxNonConvergence {
                    iterations,
                    score_norm,
                    last_beta: beta,
                });
            }
        }
    }

    let sigma_beta = invert_information(&ev.information)?;
    let baseline = StepFunction::from_jumps(
        ev.baseline_terms
            .iter()
            .map(|t| (t.time, t.deaths / t.risk_weight)),
    )?;

    Ok(CoxFit {
        beta_hat: DVector::from_vec(beta),
        sigma_beta,
        breslow_baseline: baseline,
        log_partial_likelihood: ev.log_lik,
        iterations,
        converged,
        covariate_names: cohort.covariate_names.clone(),
        baseline_terms: ev.baseline_terms,
    })
}
