//! Empirical-likelihood weights under moment constraints.
//!
//! Maximizing `sum_i log w_i` subject to `w_i > 0`, `sum w_i = 1`, and
//! `sum_i w_i h(Z_i) = mu` has the closed-form solution
//! `w_i = n^-1 [1 + gamma' (h(Z_i) - mu)]^-1`, where the multiplier `gamma`
//! maximizes the strictly concave dual `sum_i log[1 + gamma' (h(Z_i) - mu)]`
//! on the open domain where every bracket is positive. This module evaluates
//! constraint rows, solves the dual by damped Newton, and checks the
//! convex-hull feasibility condition that the solution requires.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::error::{Error, Result};

/// Lower bound kept on every dual bracket `1 + gamma' v_i` during the solve.
const BRACKET_FLOOR: f64 = 1e-10;

/// Weights below `NEAR_BOUNDARY_FACTOR / n` trigger the near-boundary flag.
const NEAR_BOUNDARY_FACTOR: f64 = 1e-6;

/// Constraint residual accepted when the Newton iterate can no longer move
/// at f64 resolution; matches the `sum w_i h_i = mu` invariant tolerance.
const STAGNATION_RESIDUAL: f64 = 1e-8;

/// Reference to one covariate inside a conditioning clause, e.g.
/// `given: {k: 1, value: 1}` for "covariate 1 equal to 1".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Given {
    /// 1-based covariate index.
    pub k: usize,
    pub value: f64,
}

/// One constraint descriptor. Covariate indices are 1-based, matching the
/// on-disk JSON format. Conditional moments encode `Z_j * I(Z_k = v)` with
/// the target interpreted as the raw joint expectation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ConstraintItem {
    RawMoment { j: usize },
    SecondMoment { j: usize },
    ConditionalMoment { j: usize, given: Given },
    ConditionalSecondMoment { j: usize, given: Given },
    Indicator { k: usize, value: f64 },
}

impl ConstraintItem {
    /// Evaluate `h(z)` for this descriptor; indices already validated.
    fn evaluate(&self, z: &[f64]) -> f64 {
        match self {
            Self::RawMoment { j } => z[j - 1],
            Self::SecondMoment { j } => z[j - 1] * z[j - 1],
            Self::ConditionalMoment { j, given } => {
                if z[given.k - 1] == given.value {
                    z[j - 1]
                } else {
                    0.0
                }
            }
            Self::ConditionalSecondMoment { j, given } => {
                if z[given.k - 1] == given.value {
                    z[j - 1] * z[j - 1]
                } else {
                    0.0
                }
            }
            Self::Indicator { k, value } => {
                if z[k - 1] == *value {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn max_index(&self) -> usize {
        match self {
            Self::RawMoment { j } | Self::SecondMoment { j } => *j,
            Self::ConditionalMoment { j, given } | Self::ConditionalSecondMoment { j, given } => {
                (*j).max(given.k)
            }
            Self::Indicator { k, .. } => *k,
        }
    }

    fn min_index(&self) -> usize {
        match self {
            Self::RawMoment { j } | Self::SecondMoment { j } => *j,
            Self::ConditionalMoment { j, given } | Self::ConditionalSecondMoment { j, given } => {
                (*j).min(given.k)
            }
            Self::Indicator { k, .. } => *k,
        }
    }
}

/// Constraint descriptors with their target values and the precision of the
/// external estimates behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub items: Vec<ConstraintItem>,
    /// Target expectations `mu` (estimated or known).
    pub targets: Vec<f64>,
    /// Diagonal of `var(mu_hat)`; zeros when the targets are known exactly.
    #[serde(default)]
    pub target_variances: Vec<f64>,
    /// Full covariance of `mu_hat`, row-major, when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_covariance: Option<Vec<Vec<f64>>>,
    /// Size of the external sample behind the targets.
    pub m: u64,
}

impl ConstraintSpec {
    /// Number of constraints `q`.
    pub fn q(&self) -> usize {
        self.items.len()
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        let q = self.q();
        if self.targets.len() != q {
            return Err(Error::DimensionMismatch(format!(
                "{q} constraint items but {} targets",
                self.targets.len()
            )));
        }
        if !self.target_variances.is_empty() && self.target_variances.len() != q {
            return Err(Error::DimensionMismatch(format!(
                "{q} constraint items but {} target variances",
                self.target_variances.len()
            )));
        }
        if self.target_variances.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput("target variances must be nonnegative".into()));
        }
        if let Some(cov) = &self.target_covariance {
            if cov.len() != q || cov.iter().any(|row| row.len() != q) {
                return Err(Error::DimensionMismatch(format!(
                    "target covariance must be {q}x{q}"
                )));
            }
        }
        for item in &self.items {
            if item.min_index() == 0 || item.max_index() > p {
                return Err(Error::InvalidInput(format!(
                    "constraint {item:?} references a covariate outside 1..={p}"
                )));
            }
        }
        Ok(())
    }

    /// Variances as a length-`q` vector, zero-filled when absent.
    pub fn variances_or_zero(&self) -> Vec<f64> {
        if self.target_variances.is_empty() {
            vec![0.0; self.q()]
        } else {
            self.target_variances.clone()
        }
    }

    /// Covariance of `mu_hat` as a matrix: the full matrix when present,
    /// otherwise the diagonal of `target_variances`.
    pub fn covariance_matrix(&self, diag_only: bool) -> DMatrix<f64> {
        let q = self.q();
        if !diag_only {
            if let Some(cov) = &self.target_covariance {
                let mut m = DMatrix::zeros(q, q);
                for (i, row) in cov.iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        m[(i, j)] = v;
                    }
                }
                return m;
            }
        }
        DMatrix::from_diagonal(&DVector::from_vec(self.variances_or_zero()))
    }
}

/// Evaluate the constraint matrix `H`: row `i` is `h(Z_i)`.
pub fn evaluate_constraints(cohort: &Cohort, spec: &ConstraintSpec) -> Result<DMatrix<f64>> {
    spec.validate(cohort.p())?;
    let n = cohort.n();
    let q = spec.q();
    let mut h = DMatrix::zeros(n, q);
    for (i, s) in cohort.subjects.iter().enumerate() {
        for (j, item) in spec.items.iter().enumerate() {
            h[(i, j)] = item.evaluate(&s.covariates);
        }
    }
    Ok(h)
}

/// Solution of the EL dual problem.
#[derive(Debug, Clone)]
pub struct ElWeights {
    /// Lagrange multiplier at the dual optimum.
    pub gamma_hat: DVector<f64>,
    /// Probability weights, strictly positive and summing to one.
    pub weights: Vec<f64>,
    /// Dual objective `sum_i log[1 + gamma' (h_i - mu)]` at the optimum.
    pub dual_value: f64,
    pub converged: bool,
    pub iterations: usize,
    /// True when some weight fell below `1e-6 / n`; variance formulas degrade
    /// near the feasibility boundary.
    pub near_boundary: bool,
}

/// How thoroughly to verify the convex-hull condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeasibilityCheck {
    /// Fast directional probes (coordinate axes, random directions, and data
    /// null-space directions). Can miss thin-hull cases near the boundary.
    #[default]
    Probe,
    /// Exact linear-programming certificate; cost grows with `n * q`.
    Lp,
}

/// Outcome of [`check_feasibility`].
#[derive(Debug, Clone)]
pub struct Feasibility {
    pub feasible: bool,
    /// When infeasible, a direction `d` with `(h_i - mu)' d <= 0` for all
    /// (or almost all) rows: the certificate that the targets sit outside or
    /// on the boundary of the convex hull.
    pub direction: Option<Vec<f64>>,
}

fn centered_rows(h: &DMatrix<f64>, targets: &[f64]) -> Result<DMatrix<f64>> {
    if h.ncols() != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "H has {} columns but {} targets",
            h.ncols(),
            targets.len()
        )));
    }
    let mut v = h.clone();
    for mut row in v.row_iter_mut() {
        for (j, &t) in targets.iter().enumerate() {
            row[j] -= t;
        }
    }
    Ok(v)
}

/// Check whether zero lies strictly inside the convex hull of
/// `{h_i - mu}`, the existence condition for EL weights.
pub fn check_feasibility(
    h: &DMatrix<f64>,
    targets: &[f64],
    mode: FeasibilityCheck,
) -> Result<Feasibility> {
    let v = centered_rows(h, targets)?;
    Ok(match mode {
        FeasibilityCheck::Probe => probe_feasibility(&v),
        FeasibilityCheck::Lp => lp_feasibility(&v),
    })
}

fn probe_feasibility(v: &DMatrix<f64>) -> Feasibility {
    let (n, q) = v.shape();
    let scale = v.amax().max(1e-300);
    let tol = 1e-12 * scale;

    if n <= q {
        // Fewer points than dimensions plus one: the hull cannot have interior.
        let dir = thin_direction(v).unwrap_or_else(|| vec![1.0; q]);
        return Feasibility {
            feasible: false,
            direction: Some(dir),
        };
    }
    // Rank deficiency: all rows inside a proper subspace, no interior.
    if let Some(dir) = thin_direction(v) {
        return Feasibility {
            feasible: false,
            direction: Some(dir),
        };
    }

    let mut probes: Vec<DVector<f64>> = Vec::new();
    for j in 0..q {
        let mut e = DVector::zeros(q);
        e[j] = 1.0;
        probes.push(e);
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x4655_4c4c);
    for _ in 0..64 {
        let d = DVector::from_fn(q, |_, _| rng.random_range(-1.0..1.0_f64));
        if d.norm() > 1e-6 {
            probes.push(d.normalize());
        }
    }

    for d in &probes {
        let proj = v * d;
        let max = proj.max();
        let min = proj.min();
        if max <= tol {
            return Feasibility {
                feasible: false,
                direction: Some(d.iter().copied().collect()),
            };
        }
        if min >= -tol {
            return Feasibility {
                feasible: false,
                direction: Some(d.iter().map(|x| -x).collect()),
            };
        }
    }
    Feasibility {
        feasible: true,
        direction: None,
    }
}

/// Direction orthogonal to the row space when the rows are rank-deficient.
fn thin_direction(v: &DMatrix<f64>) -> Option<Vec<f64>> {
    let q = v.ncols();
    let gram = v.transpose() * v;
    let eig = gram.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().fold(0.0_f64, |a, &b| a.max(b));
    let (min_idx, &min_ev) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())?;
    if min_ev <= 1e-18 * max_ev.max(1e-300) || max_ev == 0.0 {
        let dir: Vec<f64> = (0..q).map(|i| eig.eigenvectors[(i, min_idx)]).collect();
        Some(dir)
    } else {
        None
    }
}

/// Exact interiority certificate: zero is interior iff for every direction `d`
/// with `||d||_inf = 1` the maximum projection `max_i v_i' d` is strictly
/// positive. Each face of the sup-norm ball is one LP.
fn lp_feasibility(v: &DMatrix<f64>) -> Feasibility {
    use microlp::{ComparisonOp, OptimizationDirection, Problem};

    let (n, q) = v.shape();
    let scale = v.amax().max(1e-300);
    let tol = 1e-9 * scale;

    for j in 0..q {
        for sigma in [1.0, -1.0] {
            let mut problem = Problem::new(OptimizationDirection::Minimize);
            let d_vars: Vec<_> = (0..q)
                .map(|k| {
                    if k == j {
                        problem.add_var(0.0, (sigma, sigma))
                    } else {
                        problem.add_var(0.0, (-1.0, 1.0))
                    }
                })
                .collect();
            let s_var = problem.add_var(1.0, (f64::NEG_INFINITY, f64::INFINITY));
            for i in 0..n {
                let mut terms: Vec<_> = (0..q).map(|k| (d_vars[k], v[(i, k)])).collect();
                terms.push((s_var, -1.0));
                problem.add_constraint(&terms, ComparisonOp::Le, 0.0);
            }
            match problem.solve() {
                Ok(solution) => {
                    if solution.objective() <= tol {
                        let dir: Vec<f64> = d_vars.iter().map(|&v| solution[v]).collect();
                        return Feasibility {
                            feasible: false,
                            direction: Some(dir),
                        };
                    }
                }
                Err(_) => {
                    // An unsolvable face LP should not happen for bounded
                    // problems; treat as infeasible evidence along this axis.
                    let mut dir = vec![0.0; q];
                    dir[j] = sigma;
                    return Feasibility {
                        feasible: false,
                        direction: Some(dir),
                    };
                }
            }
        }
    }
    Feasibility {
        feasible: true,
        direction: None,
    }
}

/// Solve the EL dual by damped Newton with a backtracking line search that
/// keeps every bracket `1 + gamma' (h_i - mu)` at or above `1e-10`.
pub fn solve_el_dual(
    h: &DMatrix<f64>,
    targets: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<ElWeights> {
    let v = centered_rows(h, targets)?;
    let (n, q) = v.shape();
    let nf = n as f64;

    let feas = probe_feasibility(&v);
    if !feas.feasible {
        return Err(Error::InfeasibleConstraint {
            direction: feas.direction.unwrap_or_default(),
        });
    }

    let mut gamma = DVector::zeros(q);
    let mut brackets = vec![1.0_f64; n];
    let mut objective = 0.0_f64;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..max_iter {
        iterations = iter;
        // Mean gradient: exactly the residual sum_i w_i h_i - mu.
        let mut grad = DVector::zeros(q);
        for (i, row) in v.row_iter().enumerate() {
            let d = brackets[i];
            for j in 0..q {
                grad[j] += row[j] / d;
            }
        }
        grad /= nf;
        if grad.amax() < tol {
            converged = true;
            break;
        }

        // Negated Hessian (positive definite): (1/n) sum v v' / D^2.
        let mut curv = DMatrix::zeros(q, q);
        for (i, row) in v.row_iter().enumerate() {
            let d2 = brackets[i] * brackets[i];
            for j in 0..q {
                for k in 0..q {
                    curv[(j, k)] += row[j] * row[k] / d2;
                }
            }
        }
        curv /= nf;
        let chol = match curv.clone().cholesky() {
            Some(c) => c,
            None => {
                return Err(Error::ElNonConvergence {
                    iterations: iter,
                    last_gamma: gamma.iter().copied().collect(),
                })
            }
        };
        let direction = chol.solve(&grad);

        let mut step = 1.0;
        let mut accepted = false;
        let mut moved = false;
        for _ in 0..80 {
            let candidate = &gamma + &direction * step;
            let mut ok = true;
            let mut cand_brackets = Vec::with_capacity(n);
            let mut cand_obj = 0.0;
            for row in v.row_iter() {
                let mut d = 1.0;
                for j in 0..q {
                    d += candidate[j] * row[j];
                }
                if d < BRACKET_FLOOR {
                    ok = false;
                    break;
                }
                cand_brackets.push(d);
                cand_obj += d.ln();
            }
            if ok && cand_obj >= objective - 1e-12 {
                moved = candidate != gamma;
                gamma = candidate;
                brackets = cand_brackets;
                objective = cand_obj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        // Once the Newton increment drops below one ulp of gamma the iterate
        // is the numeric optimum. Accept it if the residual already meets the
        // weight-constraint tolerance (1e-8 on sum w h - mu), else report.
        if !accepted || !moved {
            if grad.amax() < STAGNATION_RESIDUAL * (1.0 + gamma.amax()) {
                converged = true;
                break;
            }
            return Err(Error::ElNonConvergence {
                iterations: iter,
                last_gamma: gamma.iter().copied().collect(),
            });
        }
    }

    if !converged {
        return Err(Error::ElNonConvergence {
            iterations: max_iter,
            last_gamma: gamma.iter().copied().collect(),
        });
    }

    let weights: Vec<f64> = brackets.iter().map(|d| 1.0 / (nf * d)).collect();
    let near_boundary = weights.iter().any(|&w| w < NEAR_BOUNDARY_FACTOR / nf);
    Ok(ElWeights {
        gamma_hat: gamma,
        weights,
        dual_value: objective,
        converged,
        iterations,
        near_boundary,
    })
}
