//! The recalibration engine.
//!
//! Given a fitted Cox model on the source cohort and target-side summaries
//! `S(t)` (plus, optionally, covariate-moment constraints), the engine solves
//! per-time estimating equations
//!
//! ```text
//! sum_i w_i [ exp{-V(t) exp(beta' Z_i)} - S(t) ] = 0
//! ```
//!
//! for the recalibrated cumulative baseline hazard `V(t)`, with `w_i`
//! uniform (the unweighted estimator) or empirical-likelihood weights that
//! match the target's covariate moments (the weighted estimator). Each
//! equation is strictly decreasing in `V(t)`, so the root is unique.
//!
//! Asymptotic variances follow the stacked-estimating-equation expansion:
//! the per-subject influence combines `rho_1 = Phi / D` with a correction
//! for the estimated multiplier `gamma`, plus external terms for the noise
//! in `S(t)`, `mu`, and `beta`. The unweighted estimator is the special case
//! `D = 1` with no constraint block.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cohort::Cohort;
use crate::cox::CoxFit;
use crate::el::{evaluate_constraints, solve_el_dual, ConstraintSpec, ElWeights};
use crate::error::{Error, Result};

/// Summary statistics from the target population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    /// Increasing query times `t_1 < ... < t_s`.
    pub times: Vec<f64>,
    /// Disease-free probabilities `S(t_k)`, each in (0, 1].
    pub survival: Vec<f64>,
    /// Pointwise variances of the survival estimates.
    pub survival_variance: Vec<f64>,
    /// Full cross-time covariance of the survival estimates, row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survival_covariance: Option<Vec<Vec<f64>>>,
    /// Moment constraints for the weighted estimator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<ConstraintSpec>,
    /// Size of the target sample behind the summaries.
    pub m: u64,
    /// `cov(mu_hat_j, S_hat(t_k))`, a q x s matrix. Usually unavailable;
    /// treated as zero when absent, the usual situation in practice.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_s_covariance: Option<Vec<Vec<f64>>>,
}

impl TargetSummary {
    pub fn s(&self) -> usize {
        self.times.len()
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        let s = self.s();
        if self.survival.len() != s || self.survival_variance.len() != s {
            return Err(Error::DimensionMismatch(format!(
                "times ({s}), survival ({}), survival_variance ({}) must share a length",
                self.survival.len(),
                self.survival_variance.len()
            )));
        }
        if s == 0 {
            return Err(Error::InvalidInput("at least one query time is required".into()));
        }
        if self.m == 0 {
            return Err(Error::InvalidInput("target sample size m must be >= 1".into()));
        }
        if self.times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("times must be strictly increasing".into()));
        }
        if self.times[0] <= 0.0 {
            return Err(Error::InvalidInput("times must be positive".into()));
        }
        for (&t, &sv) in self.times.iter().zip(&self.survival) {
            if !(sv > 0.0 && sv <= 1.0) {
                return Err(Error::InvalidSurvival { time: t, value: sv });
            }
        }
        if self.survival.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidInput(
                "survival must be nonincreasing in time".into(),
            ));
        }
        if self.survival_variance.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput("survival variances must be nonnegative".into()));
        }
        if let Some(cov) = &self.survival_covariance {
            if cov.len() != s || cov.iter().any(|r| r.len() != s) {
                return Err(Error::DimensionMismatch(format!(
                    "survival covariance must be {s}x{s}"
                )));
            }
        }
        if let Some(spec) = &self.constraints {
            spec.validate(p)?;
            if let Some(ms) = &self.mu_s_covariance {
                if ms.len() != spec.q() || ms.iter().any(|r| r.len() != s) {
                    return Err(Error::DimensionMismatch(format!(
                        "mu-survival covariance must be {}x{s}",
                        spec.q()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Covariance of the survival estimates: the supplied matrix, or the
    /// diagonal of the pointwise variances.
    fn survival_cov(&self, k: usize, l: usize) -> f64 {
        match &self.survival_covariance {
            Some(cov) => cov[k][l],
            None => {
                if k == l {
                    self.survival_variance[k]
                } else {
                    0.0
                }
            }
        }
    }

    /// `cov(mu_hat, S_hat(t_k))` as a q-vector (zeros when unavailable).
    fn mu_s_cov_column(&self, q: usize, k: usize) -> DVector<f64> {
        match &self.mu_s_covariance {
            Some(ms) => DVector::from_fn(q, |j, _| ms[j][k]),
            None => DVector::zeros(q),
        }
    }
}

/// Which estimating equation to solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Unweighted,
    Weighted,
}

#[derive(Debug, Clone)]
pub struct RecalOptions {
    /// Two-sided confidence level, in (0, 1).
    pub ci_level: f64,
    /// Use only the diagonal of `var(mu_hat)` (and zero `cov(mu, S)`), the
    /// information usually available in practice.
    pub diag_approx: bool,
    /// Apply an isotonic (pool-adjacent-violators) projection to the point
    /// estimates across times. Presentation aid only, not part of the
    /// estimator; off by default.
    pub isotonic: bool,
    /// Residual tolerance for the root solves.
    pub root_tol: f64,
    pub el_tol: f64,
    pub el_max_iter: usize,
}

impl Default for RecalOptions {
    fn default() -> Self {
        Self {
            ci_level: 0.95,
            diag_approx: true,
            isotonic: false,
            root_tol: 1e-12,
            el_tol: 1e-10,
            el_max_iter: 100,
        }
    }
}

/// Recalibrated baseline hazard with pointwise inference and cross-time
/// covariances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecalResult {
    pub times: Vec<f64>,
    /// Recalibrated cumulative baseline hazard at each time.
    pub lambda0: Vec<f64>,
    pub method: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_hat: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// Standard errors `sigma_hat / sqrt(n)`.
    pub se: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub ci_level: f64,
    pub diag_approx: bool,
    /// Estimated covariance of the hazard estimates across times (s x s).
    pub cov_lambda: Vec<Vec<f64>>,
    /// Estimated covariance between `beta_hat` and the hazard estimates (p x s).
    pub cov_beta_lambda: Vec<Vec<f64>>,
    /// Some empirical-likelihood weight fell below `1e-6 / n`; variance
    /// estimates degrade near the feasibility boundary.
    pub near_boundary: bool,
}

impl RecalResult {
    /// Tidy CSV: `time,estimate,se,ci_lo,ci_hi,method`.
    pub fn to_csv_writer<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["time", "estimate", "se", "ci_lo", "ci_hi", "method"])
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        let label = match self.method {
            Mode::Unweighted => "unweighted",
            Mode::Weighted => "weighted",
        };
        for k in 0..self.times.len() {
            wtr.write_record([
                format!("{}", self.times[k]),
                format!("{}", self.lambda0[k]),
                format!("{}", self.se[k]),
                format!("{}", self.ci_lower[k]),
                format!("{}", self.ci_upper[k]),
                label.to_string(),
            ])
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// The recalibrated hazard as a step function over the query times.
    pub fn lambda0_step(&self) -> Result<crate::stepfn::StepFunction> {
        crate::stepfn::StepFunction::new(self.times.clone(), self.lambda0.clone(), 0.0)
    }
}

/// Standard-normal quantile (used for interval construction).
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// `Phi(Z; V, beta, S) = exp{-V exp(beta' Z)} - S`, the per-subject moment.
pub fn phi(z: &[f64], v: f64, beta: &[f64], s: f64) -> f64 {
    (-v * crate::cohort::dot(beta, z).exp()).exp() - s
}

/// Solve `n^-1 sum_i Phi(Z_i; V, beta, S) = 0` for `V >= 0`.
pub fn solve_unweighted(cohort: &Cohort, beta: &[f64], s_t: f64, tol: f64) -> Result<f64> {
    let exp_scores = exp_scores(cohort, beta)?;
    let n = exp_scores.len() as f64;
    let uniform = vec![1.0 / n; exp_scores.len()];
    solve_root(&exp_scores, &uniform, s_t, tol)
}

/// Solve the weighted estimating equation `sum_i w_i Phi(Z_i; V, beta, S) = 0`.
pub fn solve_weighted(
    cohort: &Cohort,
    beta: &[f64],
    s_t: f64,
    weights: &[f64],
    tol: f64,
) -> Result<f64> {
    let exp_scores = exp_scores(cohort, beta)?;
    if weights.len() != exp_scores.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} subjects",
            weights.len(),
            exp_scores.len()
        )));
    }
    if weights.iter().any(|&w| w.is_nan() || w <= 0.0) {
        return Err(Error::InvalidInput("weights must be strictly positive".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "weights must sum to one (got {total})"
        )));
    }
    solve_root(&exp_scores, weights, s_t, tol)
}

fn exp_scores(cohort: &Cohort, beta: &[f64]) -> Result<Vec<f64>> {
    Ok(cohort
        .linear_predictors(beta)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// Root of `f(V) = sum_i w_i exp(-V e_i) - S`, which decreases strictly from
/// `1 - S >= 0` at `V = 0`. Bracket by geometric growth, then safeguarded
/// Newton with bisection fallback.
fn solve_root(exp_scores: &[f64], weights: &[f64], s_t: f64, tol: f64) -> Result<f64> {
    if !(s_t > 0.0 && s_t <= 1.0) {
        return Err(Error::InvalidSurvival {
            time: f64::NAN,
            value: s_t,
        });
    }
    if s_t == 1.0 {
        return Ok(0.0);
    }
    let f_and_deriv = |v: f64| -> (f64, f64) {
        let mut f = -s_t;
        let mut df = 0.0;
        for (&e, &w) in exp_scores.iter().zip(weights) {
            let t = w * (-v * e).exp();
            f += t;
            df -= t * e;
        }
        (f, df)
    };

    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut f_hi = f_and_deriv(hi).0;
    let mut guard = 0;
    while f_hi > 0.0 {
        lo = hi;
        hi *= 4.0;
        f_hi = f_and_deriv(hi).0;
        guard += 1;
        if guard > 600 {
            return Err(Error::InvalidInput(
                "estimating equation has no sign change at any finite hazard".into(),
            ));
        }
    }

    let mut v = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (f, df) = f_and_deriv(v);
        if f.abs() < tol {
            return Ok(v);
        }
        if f > 0.0 {
            lo = v;
        } else {
            hi = v;
        }
        let newton = v - f / df;
        v = if df < 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Ok(v)
}

/// Per-time statistics of the stacked estimating-equation expansion,
/// evaluated at the plug-in estimates. Covers both estimators: the
/// unweighted case is `q = 0` with all brackets equal to one.
struct RhoStats {
    /// `E*[rho_1,Lambda]`, the root's local slope (negative).
    slope: f64,
    /// `E*[rho_1,beta]`, a p-vector.
    rho_beta: DVector<f64>,
    /// `E*[rho_1,S]` (equals -1 when q = 0).
    rho_s: f64,
    /// `Pi_{1,4} = E*[rho_1,mu] - E*[Q_gamma,mu]' a`, a q-vector.
    pi14: DVector<f64>,
    /// `E*[rho_1,gamma]' a` with `a = (E*[Q_gamma,gamma])^-1 E*[rho_1,gamma]` (nonpositive).
    a_corr: f64,
    /// Per-subject influence `psi_i = rho_{1,i} - a' Q_{gamma,i}`.
    psi: Vec<f64>,
    mean_rho_sq: f64,
}

/// Shared per-solve context: risk scores, constraint rows, and EL brackets.
struct EeContext<'a> {
    cohort: &'a Cohort,
    exp_scores: Vec<f64>,
    /// Centered constraint rows `h_i - mu` (n x q; q = 0 when unweighted).
    v_rows: DMatrix<f64>,
    /// Dual brackets `D_i = 1 + gamma'(h_i - mu)`; all ones when unweighted.
    brackets: Vec<f64>,
    /// Probability weights used by the estimating equation.
    weights: Vec<f64>,
}

impl<'a> EeContext<'a> {
    fn unweighted(cohort: &'a Cohort, fit: &CoxFit) -> Result<Self> {
        let exp_scores = exp_scores(cohort, fit.beta_hat.as_slice())?;
        let n = cohort.n();
        Ok(Self {
            cohort,
            exp_scores,
            v_rows: DMatrix::zeros(n, 0),
            brackets: vec![1.0; n],
            weights: vec![1.0 / n as f64; n],
        })
    }

    fn weighted(
        cohort: &'a Cohort,
        fit: &CoxFit,
        spec: &ConstraintSpec,
        el: &ElWeights,
    ) -> Result<Self> {
        let exp_scores = exp_scores(cohort, fit.beta_hat.as_slice())?;
        let n = cohort.n();
        let h = evaluate_constraints(cohort, spec)?;
        let q = spec.q();
        let mut v_rows = h;
        for mut row in v_rows.row_iter_mut() {
            for j in 0..q {
                row[j] -= spec.targets[j];
            }
        }
        let brackets: Vec<f64> = el.weights.iter().map(|&w| 1.0 / (n as f64 * w)).collect();
        Ok(Self {
            cohort,
            exp_scores,
            v_rows,
            brackets,
            weights: el.weights.clone(),
        })
    }

    fn n(&self) -> usize {
        self.exp_scores.len()
    }

    fn q(&self) -> usize {
        self.v_rows.ncols()
    }

    fn solve(&self, s_t: f64, tol: f64) -> Result<f64> {
        solve_root(&self.exp_scores, &self.weights, s_t, tol)
    }

    /// Evaluate the rho statistics at `(lambda, gamma_hat, s_t)`.
    fn rho_stats(&self, lambda: f64, gamma: &DVector<f64>, s_t: f64) -> Result<RhoStats> {
        let n = self.n();
        let nf = n as f64;
        let p = self.cohort.p();
        let q = self.q();

        let mut slope = 0.0;
        let mut rho_beta = DVector::zeros(p);
        let mut rho_s = 0.0;
        let mut rho_gamma = DVector::zeros(q);
        let mut rho_mu = DVector::zeros(q);
        let mut q_gg = DMatrix::zeros(q, q);
        let mut q_gm = DMatrix::zeros(q, q);
        let mut rho = vec![0.0; n];
        let mut mean_rho_sq = 0.0;

        for (i, rho_slot) in rho.iter_mut().enumerate() {
            let e = self.exp_scores[i];
            let d = self.brackets[i];
            let surv_i = (-lambda * e).exp();
            let phi_i = surv_i - s_t;
            let phi_v = -e * surv_i;

            let rho_i = phi_i / d;
            *rho_slot = rho_i;
            mean_rho_sq += rho_i * rho_i;
            slope += phi_v / d;
            rho_s -= 1.0 / d;
            for j in 0..p {
                rho_beta[j] += lambda * phi_v * self.cohort.subjects[i].covariates[j] / d;
            }
            if q > 0 {
                let d2 = d * d;
                for a in 0..q {
                    let va = self.v_rows[(i, a)];
                    rho_gamma[a] -= phi_i * va / d2;
                    rho_mu[a] += phi_i * gamma[a] / d2;
                    q_gm[(a, a)] -= 1.0 / d;
                    for b in 0..q {
                        let vb = self.v_rows[(i, b)];
                        q_gg[(a, b)] -= va * vb / d2;
                        q_gm[(a, b)] += va * gamma[b] / d2;
                    }
                }
            }
        }
        slope /= nf;
        rho_s /= nf;
        rho_beta /= nf;
        mean_rho_sq /= nf;

        let (gamma_correction, pi14, a_corr) = if q > 0 {
            rho_gamma /= nf;
            rho_mu /= nf;
            q_gg /= nf;
            q_gm /= nf;
            let lu = q_gg.clone().lu();
            let a = lu
                .solve(&rho_gamma)
                .ok_or(Error::DegenerateConstraints)?;
            let pi14 = &rho_mu - q_gm.transpose() * &a;
            let a_corr = rho_gamma.dot(&a);
            (a, pi14, a_corr)
        } else {
            (DVector::zeros(0), DVector::zeros(0), 0.0)
        };

        let psi: Vec<f64> = rho
            .iter()
            .enumerate()
            .map(|(i, &rho_i)| {
                let mut corr = 0.0;
                for j in 0..q {
                    corr += gamma_correction[j] * self.v_rows[(i, j)] / self.brackets[i];
                }
                rho_i - corr
            })
            .collect();

        Ok(RhoStats {
            slope,
            rho_beta,
            rho_s,
            pi14,
            a_corr,
            psi,
            mean_rho_sq,
        })
    }
}

/// Assemble `sigma^2` for one time from its rho statistics.
fn sigma_sq_from_stats(
    stats: &RhoStats,
    n: usize,
    fit: &CoxFit,
    summary: &TargetSummary,
    spec: Option<&ConstraintSpec>,
    t_index: usize,
    diag_approx: bool,
) -> f64 {
    let nf = n as f64;
    let sigma_beta_n = &fit.sigma_beta * nf; // n * var(beta_hat) -> Sigma_beta
    let beta_term = (stats.rho_beta.transpose() * &sigma_beta_n * &stats.rho_beta)[(0, 0)];
    let s_term = nf * summary.survival_variance[t_index] * stats.rho_s * stats.rho_s;

    let mut pi2 = stats.mean_rho_sq + stats.a_corr + beta_term + s_term;
    if let Some(spec) = spec {
        let sigma_mu_n = spec.covariance_matrix(diag_approx) * nf;
        pi2 += (stats.pi14.transpose() * &sigma_mu_n * &stats.pi14)[(0, 0)];
        let q = spec.q();
        let mu_s = summary.mu_s_cov_column(q, t_index) * nf;
        pi2 += 2.0 * stats.rho_s * stats.pi14.dot(&mu_s);
    }
    pi2 / (stats.slope * stats.slope)
}

/// Plug-in asymptotic variance `sigma_1^2` of the unweighted estimator at
/// one time.
pub fn variance_unweighted(
    cohort: &Cohort,
    fit: &CoxFit,
    summary: &TargetSummary,
    lambda_hat: f64,
    t_index: usize,
) -> Result<f64> {
    summary.validate(cohort.p())?;
    let ctx = EeContext::unweighted(cohort, fit)?;
    let stats = ctx.rho_stats(lambda_hat, &DVector::zeros(0), summary.survival[t_index])?;
    Ok(sigma_sq_from_stats(
        &stats,
        cohort.n(),
        fit,
        summary,
        None,
        t_index,
        true,
    ))
}

/// Plug-in asymptotic variance `sigma_3^2` (or its diagonal approximation)
/// of the weighted estimator at one time.
pub fn variance_weighted(
    cohort: &Cohort,
    fit: &CoxFit,
    summary: &TargetSummary,
    lambda_hat: f64,
    el: &ElWeights,
    t_index: usize,
    diag_approx: bool,
) -> Result<f64> {
    summary.validate(cohort.p())?;
    let spec = summary
        .constraints
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("weighted variance requires constraints".into()))?;
    let ctx = EeContext::weighted(cohort, fit, spec, el)?;
    let stats = ctx.rho_stats(lambda_hat, &el.gamma_hat, summary.survival[t_index])?;
    Ok(sigma_sq_from_stats(
        &stats,
        cohort.n(),
        fit,
        summary,
        Some(spec),
        t_index,
        diag_approx,
    ))
}

/// Cross-time covariance of the recalibrated hazard and its covariance with
/// `beta_hat`, from the stacked influence representation.
pub fn influence_covariance(
    cohort: &Cohort,
    fit: &CoxFit,
    summary: &TargetSummary,
    recal: &RecalResult,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    summary.validate(cohort.p())?;
    let n = cohort.n();
    let nf = n as f64;
    let s = summary.s();
    let p = cohort.p();

    let (ctx, gamma, spec) = match recal.method {
        Mode::Unweighted => (EeContext::unweighted(cohort, fit)?, DVector::zeros(0), None),
        Mode::Weighted => {
            let spec = summary
                .constraints
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("weighted result requires constraints".into()))?;
            let gamma = DVector::from_vec(
                recal
                    .gamma_hat
                    .clone()
                    .ok_or_else(|| Error::InvalidInput("weighted result lacks gamma_hat".into()))?,
            );
            let weights = recal
                .weights
                .clone()
                .ok_or_else(|| Error::InvalidInput("weighted result lacks weights".into()))?;
            let el = ElWeights {
                gamma_hat: gamma.clone(),
                weights,
                dual_value: 0.0,
                converged: true,
                iterations: 0,
                near_boundary: recal.near_boundary,
            };
            (EeContext::weighted(cohort, fit, spec, &el)?, gamma, Some(spec))
        }
    };

    let stats: Vec<RhoStats> = (0..s)
        .map(|k| ctx.rho_stats(recal.lambda0[k], &gamma, summary.survival[k]))
        .collect::<Result<_>>()?;

    let sigma_mu = spec.map(|sp| sp.covariance_matrix(recal.diag_approx));
    let mut cov_lambda = DMatrix::zeros(s, s);
    for k in 0..s {
        for l in k..s {
            // Internal part: empirical second moment of the per-subject
            // influences, as the variance of a mean.
            let mut internal = 0.0;
            for i in 0..n {
                internal += stats[k].psi[i] * stats[l].psi[i];
            }
            internal /= nf * nf;

            let beta_part =
                (stats[k].rho_beta.transpose() * &fit.sigma_beta * &stats[l].rho_beta)[(0, 0)];
            let s_part = stats[k].rho_s * stats[l].rho_s * summary.survival_cov(k, l);

            let mut external = beta_part + s_part;
            if let (Some(sp), Some(sm)) = (spec, sigma_mu.as_ref()) {
                external += (stats[k].pi14.transpose() * sm * &stats[l].pi14)[(0, 0)];
                let q = sp.q();
                let c_l = summary.mu_s_cov_column(q, l);
                let c_k = summary.mu_s_cov_column(q, k);
                external += stats[k].pi14.dot(&c_l) * stats[l].rho_s
                    + stats[l].pi14.dot(&c_k) * stats[k].rho_s;
            }

            let value = (internal + external) / (stats[k].slope * stats[l].slope);
            cov_lambda[(k, l)] = value;
            cov_lambda[(l, k)] = value;
        }
    }

    let mut cov_beta_lambda = DMatrix::zeros(p, s);
    for (l, stat) in stats.iter().enumerate() {
        let col = -(&fit.sigma_beta * &stat.rho_beta) / stat.slope;
        cov_beta_lambda.set_column(l, &col);
    }

    Ok((cov_lambda, cov_beta_lambda))
}

/// Pool-adjacent-violators projection onto nondecreasing sequences.
fn isotonic_projection(xs: &mut [f64]) {
    let n = xs.len();
    let mut level: Vec<f64> = Vec::with_capacity(n);
    let mut count: Vec<usize> = Vec::with_capacity(n);
    for &x in xs.iter() {
        level.push(x);
        count.push(1);
        while level.len() > 1 {
            let last = level.len() - 1;
            if level[last - 1] <= level[last] {
                break;
            }
            let merged =
                (level[last - 1] * count[last - 1] as f64 + level[last] * count[last] as f64)
                    / (count[last - 1] + count[last]) as f64;
            level[last - 1] = merged;
            count[last - 1] += count[last];
            level.pop();
            count.pop();
        }
    }
    let mut pos = 0;
    for (lv, ct) in level.into_iter().zip(count) {
        for _ in 0..ct {
            xs[pos] = lv;
            pos += 1;
        }
    }
}

/// Run the full recalibration: solve the estimating equation at every query
/// time, attach standard errors and confidence intervals, and fill the
/// cross-time covariance blocks.
pub fn recalibrate(
    cohort: &Cohort,
    fit: &CoxFit,
    summary: &TargetSummary,
    mode: Mode,
    options: &RecalOptions,
) -> Result<RecalResult> {
    summary.validate(cohort.p())?;
    if !(options.ci_level > 0.0 && options.ci_level < 1.0) {
        return Err(Error::InvalidInput(format!(
            "ci_level must be in (0, 1), got {}",
            options.ci_level
        )));
    }
    let n = cohort.n();
    let s = summary.s();

    let (ctx, el) = match mode {
        Mode::Unweighted => (EeContext::unweighted(cohort, fit)?, None),
        Mode::Weighted => {
            let spec = summary.constraints.as_ref().ok_or_else(|| {
                Error::InvalidInput("weighted mode requires summary.constraints".into())
            })?;
            let h = evaluate_constraints(cohort, spec)?;
            let el = solve_el_dual(&h, &spec.targets, options.el_tol, options.el_max_iter)?;
            (EeContext::weighted(cohort, fit, spec, &el)?, Some(el))
        }
    };
    let gamma = el
        .as_ref()
        .map(|e| e.gamma_hat.clone())
        .unwrap_or_else(|| DVector::zeros(0));
    let spec = match mode {
        Mode::Weighted => summary.constraints.as_ref(),
        Mode::Unweighted => None,
    };

    let mut lambda0 = Vec::with_capacity(s);
    let mut sigma_sq = Vec::with_capacity(s);
    for k in 0..s {
        let lam = ctx.solve(summary.survival[k], options.root_tol)?;
        let stats = ctx.rho_stats(lam, &gamma, summary.survival[k])?;
        sigma_sq.push(sigma_sq_from_stats(
            &stats,
            n,
            fit,
            summary,
            spec,
            k,
            options.diag_approx,
        ));
        lambda0.push(lam);
    }
    if options.isotonic {
        isotonic_projection(&mut lambda0);
    }

    let z = normal_quantile(1.0 - (1.0 - options.ci_level) / 2.0);
    let se: Vec<f64> = sigma_sq
        .iter()
        .map(|&v| (v.max(0.0) / n as f64).sqrt())
        .collect();
    let ci_lower: Vec<f64> = lambda0
        .iter()
        .zip(&se)
        .map(|(&l, &e)| (l - z * e).max(0.0))
        .collect();
    let ci_upper: Vec<f64> = lambda0.iter().zip(&se).map(|(&l, &e)| l + z * e).collect();

    let mut result = RecalResult {
        times: summary.times.clone(),
        lambda0,
        method: mode,
        gamma_hat: el.as_ref().map(|e| e.gamma_hat.iter().copied().collect()),
        weights: el.as_ref().map(|e| e.weights.clone()),
        se,
        ci_lower,
        ci_upper,
        ci_level: options.ci_level,
        diag_approx: options.diag_approx,
        cov_lambda: vec![vec![0.0; s]; s],
        cov_beta_lambda: vec![vec![0.0; s]; cohort.p()],
        near_boundary: el.as_ref().is_some_and(|e| e.near_boundary),
    };

    let (cov_lambda, cov_beta_lambda) = influence_covariance(cohort, fit, summary, &result)?;
    result.cov_lambda = (0..s)
        .map(|k| (0..s).map(|l| cov_lambda[(k, l)]).collect())
        .collect();
    result.cov_beta_lambda = (0..cohort.p())
        .map(|j| (0..s).map(|l| cov_beta_lambda[(j, l)]).collect())
        .collect();
    Ok(result)
}
