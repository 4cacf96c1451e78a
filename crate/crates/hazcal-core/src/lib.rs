//! Recalibrate Cox-model baseline hazard functions from a source cohort to a
//! target population using only target-side summary statistics.
//!
//! A risk prediction model fitted on one cohort (the *source*) rarely
//! transports as-is to a different population (the *target*): the baseline
//! hazard and the risk-factor distribution both shift. Given only summary
//! statistics from the target (disease-free probabilities `S(t)` with
//! variances, and optionally moments of the risk factors), this crate
//! re-estimates the cumulative baseline hazard for the target by solving a
//! moment condition over the source subjects, optionally reweighted by
//! empirical-likelihood weights that match the target's covariate moments.
//!
//! The pieces:
//!
//! - [`survival`]: Kaplan-Meier / Nelson-Aalen estimators and risk-set
//!   moments with delayed-entry support
//! - [`cox`]: Cox proportional-hazards fit by Newton-Raphson with the
//!   Breslow baseline
//! - [`el`]: empirical-likelihood weights under moment constraints via the
//!   Lagrange dual
//! - [`recal`]: the recalibration engine: point estimates, asymptotic
//!   variances, confidence intervals, and cross-time covariances
//! - [`absrisk`]: absolute risk under competing risks with delta-method
//!   variances
//! - [`sim`]: a Monte-Carlo laboratory for bias / coverage studies
//!
//! Replicate loops and batch predictions run data-parallel via rayon when the
//! `parallel` feature (default) is enabled; a sequential fallback produces
//! bit-identical results.

pub mod absrisk;
pub mod cohort;
pub mod cox;
pub mod el;
pub mod error;
pub mod par;
pub mod recal;
pub mod sim;
pub mod stepfn;
pub mod survival;

pub use cohort::{Cohort, EventKind, SubjectRecord};
pub use cox::{fit_cox, CoxFit, FitOptions};
pub use el::{check_feasibility, evaluate_constraints, solve_el_dual, ConstraintSpec, ElWeights};
pub use error::{Error, Result};
pub use recal::{recalibrate, Mode, RecalOptions, RecalResult, TargetSummary};
pub use stepfn::StepFunction;
