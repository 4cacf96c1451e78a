//! Nonparametric survival estimators: risk-set moments, Kaplan-Meier with
//! Greenwood variance and cross-time covariance, and Nelson-Aalen.
//!
//! All estimators use the delayed-entry risk set `Y_i(t) = I(L_i < t <= X_i)`,
//! so left-truncated cohorts are handled uniformly. Ties are aggregated into
//! single jumps (`d_u > 1`), matching the Breslow convention used by the Cox
//! fit; discrete recorded times are grouped by exact equality.

use nalgebra::{DMatrix, DVector};

use crate::cohort::{Cohort, EventKind};
use crate::error::{Error, Result};
use crate::stepfn::StepFunction;

/// Order of the risk-set moment `H_r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentOrder {
    /// Scalar `H_0`.
    Zero,
    /// Vector `H_1`.
    One,
    /// Matrix `H_2`.
    Two,
}

/// `H_r(t; beta) = n^-1 sum_i Y_i(t) Z_i^{(x)r} exp(beta' Z_i)`.
#[derive(Debug, Clone, PartialEq)]
pub enum RiskSetMoment {
    Scalar(f64),
    Vector(DVector<f64>),
    Matrix(DMatrix<f64>),
}

/// Risk-set moment of the requested order at time `t`.
pub fn risk_set_size(
    cohort: &Cohort,
    t: f64,
    beta: &[f64],
    order: MomentOrder,
) -> Result<RiskSetMoment> {
    if t < 0.0 {
        return Err(Error::InvalidInput(format!("t must be nonnegative, got {t}")));
    }
    let p = cohort.p();
    if beta.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "beta has length {}, expected {p}",
            beta.len()
        )));
    }
    let n = cohort.n() as f64;
    let mut h0 = 0.0;
    let mut h1 = DVector::zeros(p);
    let mut h2 = DMatrix::zeros(p, p);
    for s in &cohort.subjects {
        if !s.at_risk(t) {
            continue;
        }
        let w = crate::cohort::dot(beta, &s.covariates).exp();
        match order {
            MomentOrder::Zero => h0 += w,
            MomentOrder::One => {
                for (j, &z) in s.covariates.iter().enumerate() {
                    h1[j] += w * z;
                }
            }
            MomentOrder::Two => {
                for (j, &zj) in s.covariates.iter().enumerate() {
                    for (k, &zk) in s.covariates.iter().enumerate() {
                        h2[(j, k)] += w * zj * zk;
                    }
                }
            }
        }
    }
    Ok(match order {
        MomentOrder::Zero => RiskSetMoment::Scalar(h0 / n),
        MomentOrder::One => RiskSetMoment::Vector(h1 / n),
        MomentOrder::Two => RiskSetMoment::Matrix(h2 / n),
    })
}

/// How to handle competing events in the product-limit estimator. Subjects
/// with a competing first event are censored at that time; this is the only
/// supported policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CompetingTreatment {
    #[default]
    Censored,
}

/// Distinct event times with event counts and delayed-entry risk-set sizes.
#[derive(Debug, Clone)]
pub(crate) struct EventTable {
    pub times: Vec<f64>,
    pub deaths: Vec<usize>,
    pub at_risk: Vec<usize>,
}

/// Build the event table for events of interest. `d_u` counts subjects with
/// an event of interest at `u` that satisfy `L < X` (a subject whose at-risk
/// interval is empty never enters a risk set and never contributes an event).
pub(crate) fn event_table(cohort: &Cohort) -> Result<EventTable> {
    let n = cohort.n();
    let mut entries: Vec<f64> = Vec::with_capacity(n);
    let mut exits: Vec<f64> = Vec::with_capacity(n);
    let mut events: Vec<f64> = Vec::new();
    for s in &cohort.subjects {
        entries.push(s.entry_age);
        exits.push(s.exit_age);
        if s.event == EventKind::EventOfInterest && s.entry_age < s.exit_age {
            events.push(s.exit_age);
        }
    }
    entries.sort_by(|a, b| a.partial_cmp(b).unwrap());
    exits.sort_by(|a, b| a.partial_cmp(b).unwrap());
    events.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut times = Vec::new();
    let mut deaths = Vec::new();
    let mut at_risk = Vec::new();
    let mut i = 0;
    while i < events.len() {
        let u = events[i];
        let mut d = 0;
        while i < events.len() && events[i] == u {
            d += 1;
            i += 1;
        }
        // #{L < u} - #{X < u} counts subjects with L < u <= X.
        let entered = entries.partition_point(|&l| l < u);
        let gone = exits.partition_point(|&x| x < u);
        let risk = entered - gone;
        if risk == 0 {
            return Err(Error::EmptyRiskSet { time: u });
        }
        times.push(u);
        deaths.push(d);
        at_risk.push(risk);
    }
    Ok(EventTable {
        times,
        deaths,
        at_risk,
    })
}

/// Kaplan-Meier estimate with Greenwood variance.
#[derive(Debug, Clone)]
pub struct KaplanMeier {
    /// Product-limit survival curve (pre-value 1).
    pub survival: StepFunction,
    /// Greenwood pointwise variance of the survival curve (pre-value 0).
    pub variance: StepFunction,
    /// Cumulative Greenwood sum `G(t) = sum_{u<=t} d_u / (n_u (n_u - d_u))`.
    greenwood: StepFunction,
}

impl KaplanMeier {
    pub fn survival_at(&self, t: f64) -> f64 {
        self.survival.value_at(t)
    }

    pub fn variance_at(&self, t: f64) -> f64 {
        self.variance.value_at(t)
    }

    /// `cov(S(t1), S(t2)) = S(t1) S(t2) G(min(t1, t2))`. At `t1 == t2` this is
    /// exactly the Greenwood variance.
    pub fn covariance(&self, t1: f64, t2: f64) -> f64 {
        self.survival.value_at(t1) * self.survival.value_at(t2)
            * self.greenwood.value_at(t1.min(t2))
    }
}

/// Product-limit estimator over event-of-interest times, competing events
/// treated as censoring at their time.
pub fn kaplan_meier(cohort: &Cohort, _treat_competing_as: CompetingTreatment) -> Result<KaplanMeier> {
    let table = event_table(cohort)?;
    let mut surv = 1.0;
    let mut gsum = 0.0;
    let mut s_vals = Vec::with_capacity(table.times.len());
    let mut v_vals = Vec::with_capacity(table.times.len());
    let mut g_vals = Vec::with_capacity(table.times.len());
    for ((&d, &r), _) in table.deaths.iter().zip(&table.at_risk).zip(&table.times) {
        let (d, r) = (d as f64, r as f64);
        surv *= 1.0 - d / r;
        if r > d {
            gsum += d / (r * (r - d));
        }
        s_vals.push(surv);
        v_vals.push(if surv > 0.0 { surv * surv * gsum } else { 0.0 });
        g_vals.push(gsum);
    }
    Ok(KaplanMeier {
        survival: StepFunction::new(table.times.clone(), s_vals, 1.0)?,
        variance: StepFunction::new(table.times.clone(), v_vals, 0.0)?,
        greenwood: StepFunction::new(table.times, g_vals, 0.0)?,
    })
}

/// Nelson-Aalen cumulative hazard `sum_{u<=t} d_u / n_u`.
pub fn nelson_aalen(cohort: &Cohort) -> Result<StepFunction> {
    Ok(nelson_aalen_with_variance(cohort)?.0)
}

/// Nelson-Aalen estimate together with its variance `sum d_u / n_u^2`.
pub fn nelson_aalen_with_variance(cohort: &Cohort) -> Result<(StepFunction, StepFunction)> {
    let table = event_table(cohort)?;
    let mut cum = 0.0;
    let mut var = 0.0;
    let mut c_vals = Vec::with_capacity(table.times.len());
    let mut v_vals = Vec::with_capacity(table.times.len());
    for (&d, &r) in table.deaths.iter().zip(&table.at_risk) {
        let (d, r) = (d as f64, r as f64);
        cum += d / r;
        var += d / (r * r);
        c_vals.push(cum);
        v_vals.push(var);
    }
    Ok((
        StepFunction::new(table.times.clone(), c_vals, 0.0)?,
        StepFunction::new(table.times, v_vals, 0.0)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::SubjectRecord;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cohort_from(rows: &[(f64, f64, u8, f64)]) -> Cohort {
        let subjects = rows
            .iter()
            .map(|&(l, x, e, z)| {
                SubjectRecord::new(l, x, EventKind::from_code(e).unwrap(), vec![z])
            })
            .collect();
        Cohort::new(subjects, vec!["z".into()]).unwrap()
    }

    #[test]
    fn risk_set_single_subject() {
        let c = cohort_from(&[(0.0, 5.0, 0, 0.0)]);
        match risk_set_size(&c, 3.0, &[0.0], MomentOrder::Zero).unwrap() {
            RiskSetMoment::Scalar(v) => assert_eq!(v, 1.0),
            _ => unreachable!(),
        }
        match risk_set_size(&c, 6.0, &[0.0], MomentOrder::Zero).unwrap() {
            RiskSetMoment::Scalar(v) => assert_eq!(v, 0.0),
            _ => unreachable!(),
        }
    }

    #[test]
    fn risk_set_with_truncation_and_weights() {
        // L = (0, 2, 4), X = 5 for all, Z = (1, 0, 1), beta = ln 2, t = 3:
        // subjects 1, 2 at risk with weights 2 and 1 -> (2 + 1) / 3 = 1.
        let c = cohort_from(&[(0.0, 5.0, 1, 1.0), (2.0, 5.0, 1, 0.0), (4.0, 5.0, 1, 1.0)]);
        match risk_set_size(&c, 3.0, &[2.0_f64.ln()], MomentOrder::Zero).unwrap() {
            RiskSetMoment::Scalar(v) => assert_abs_diff_eq!(v, 1.0, epsilon = 1e-15),
            _ => unreachable!(),
        }
    }

    #[test]
    fn risk_set_dimension_mismatch() {
        let c = cohort_from(&[(0.0, 5.0, 0, 0.0)]);
        assert!(risk_set_size(&c, 1.0, &[0.0, 0.0], MomentOrder::Zero).is_err());
    }

    #[test]
    fn km_no_events_is_flat_one() {
        let c = cohort_from(&[(0.0, 1.0, 0, 0.0); 5]);
        let km = kaplan_meier(&c, CompetingTreatment::Censored).unwrap();
        assert_eq!(km.survival_at(0.5), 1.0);
        assert_eq!(km.survival_at(10.0), 1.0);
        assert_eq!(km.variance_at(10.0), 0.0);
    }

    #[test]
    fn km_hand_computed_product_limit() {
        // Events at t = 1, 2; censored at 1.5 and 3.
        let c = cohort_from(&[
            (0.0, 1.0, 1, 0.0),
            (0.0, 1.5, 0, 0.0),
            (0.0, 2.0, 1, 0.0),
            (0.0, 3.0, 0, 0.0),
        ]);
        let km = kaplan_meier(&c, CompetingTreatment::Censored).unwrap();
        assert_abs_diff_eq!(km.survival_at(1.0), 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(km.survival_at(2.0), 0.375, epsilon = 1e-15);
        // Greenwood at t = 1: (3/4)^2 * 1/(4*3).
        assert_abs_diff_eq!(km.variance_at(1.0), 0.046875, epsilon = 1e-15);
    }

    #[test]
    fn km_competing_treated_as_censoring() {
        let with_competing = cohort_from(&[
            (0.0, 1.0, 1, 0.0),
            (0.0, 1.5, 2, 0.0),
            (0.0, 2.0, 1, 0.0),
            (0.0, 3.0, 0, 0.0),
        ]);
        let km = kaplan_meier(&with_competing, CompetingTreatment::Censored).unwrap();
        assert_abs_diff_eq!(km.survival_at(2.0), 0.375, epsilon = 1e-15);
    }

    #[test]
    fn km_cross_covariance_matches_variance_on_diagonal() {
        let c = cohort_from(&[
            (0.0, 1.0, 1, 0.0),
            (0.0, 2.0, 1, 0.0),
            (0.0, 2.5, 0, 0.0),
            (0.0, 4.0, 1, 0.0),
        ]);
        let km = kaplan_meier(&c, CompetingTreatment::Censored).unwrap();
        for t in [0.5, 1.0, 2.0, 4.0] {
            assert_abs_diff_eq!(km.covariance(t, t), km.variance_at(t), epsilon = 1e-15);
        }
        // cov uses the earlier time's Greenwood sum
        assert_abs_diff_eq!(
            km.covariance(1.0, 4.0),
            km.survival_at(1.0) * km.survival_at(4.0) * (1.0 / (4.0 * 3.0)),
            epsilon = 1e-15
        );
    }

    #[test]
    fn na_single_event_and_sum() {
        let c = cohort_from(&[
            (0.0, 1.0, 1, 0.0),
            (0.0, 1.5, 0, 0.0),
            (0.0, 2.0, 1, 0.0),
            (0.0, 3.0, 0, 0.0),
        ]);
        let na = nelson_aalen(&c).unwrap();
        assert_abs_diff_eq!(na.value_at(1.0), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(na.value_at(2.0), 0.25 + 0.5, epsilon = 1e-15);
        assert_eq!(na.value_at(0.5), 0.0);
    }

    #[test]
    fn zero_length_at_risk_interval_is_inert() {
        // A subject with entry == exit has an empty at-risk interval; its
        // event does not enter the counting process, so every event time that
        // does count has a nonempty risk set by construction.
        let c = cohort_from(&[(4.0, 4.0, 1, 0.0), (0.0, 6.0, 1, 0.0), (0.0, 7.0, 0, 0.0)]);
        let km = kaplan_meier(&c, CompetingTreatment::Censored).unwrap();
        assert_eq!(km.survival.knots(), &[6.0]);
        assert_abs_diff_eq!(km.survival_at(6.0), 0.5, epsilon = 1e-15);
    }

    proptest! {
        /// exp(-NA) >= KM pointwise and the two agree to first order.
        #[test]
        fn na_exponentiation_brackets_km(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(3..20);
            let mut rows = Vec::new();
            for _ in 0..n {
                let x: f64 = rng.random_range(0.1..10.0);
                let e = u8::from(rng.random_bool(0.6));
                rows.push((0.0, x, e, 0.0));
            }
            let c = cohort_from(&rows);
            let km = kaplan_meier(&c, CompetingTreatment::Censored).unwrap();
            let na = nelson_aalen(&c).unwrap();
            let table = event_table(&c).unwrap();
            let bound: f64 = table
                .deaths
                .iter()
                .zip(&table.at_risk)
                .map(|(&d, &r)| d as f64 / (r as f64 * r as f64))
                .sum();
            for &t in &table.times {
                let s_km = km.survival_at(t);
                let s_na = (-na.value_at(t)).exp();
                prop_assert!(s_na >= s_km - 1e-12);
                prop_assert!((s_na - s_km).abs() <= bound + 1e-12);
            }
        }

        /// The product-limit estimator does not depend on subject order.
        #[test]
        fn km_permutation_invariant(seed in 0u64..200) {
            use rand::seq::SliceRandom;
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..15);
            let mut rows: Vec<(f64, f64, u8, f64)> = (0..n)
                .map(|_| {
                    let x: f64 = rng.random_range(0.5..8.0);
                    (0.0, x, u8::from(rng.random_bool(0.5)), 0.0)
                })
                .collect();
            let km1 = kaplan_meier(&cohort_from(&rows), CompetingTreatment::Censored).unwrap();
            rows.shuffle(&mut rng);
            let km2 = kaplan_meier(&cohort_from(&rows), CompetingTreatment::Censored).unwrap();
            prop_assert_eq!(km1.survival.knots(), km2.survival.knots());
            prop_assert_eq!(km1.survival.values(), km2.survival.values());
        }

        /// H_0 is nonincreasing in t when no subject is left-truncated.
        #[test]
        fn h0_nonincreasing_without_truncation(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<(f64, f64, u8, f64)> = (0..10)
                .map(|_| (0.0, rng.random_range(0.5..8.0), 1, rng.random_range(-1.0..1.0)))
                .collect();
            let c = cohort_from(&rows);
            let mut prev = f64::INFINITY;
            for i in 1..40 {
                // Y_i(0) = I(0 < 0 <= X) = 0, so monotonicity is a t > 0 statement.
                let t = 0.25 * i as f64;
                if let RiskSetMoment::Scalar(h0) =
                    risk_set_size(&c, t, &[0.3], MomentOrder::Zero).unwrap()
                {
                    prop_assert!(h0 <= prev + 1e-12);
                    prev = h0;
                }
            }
        }
    }
}
