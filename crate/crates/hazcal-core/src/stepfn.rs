//! Right-continuous step functions.
//!
//! Cumulative hazards and survival curves are represented as jump functions:
//! a sorted knot vector, the value attained *at* each knot, and the value
//! before the first knot. Evaluation is right-continuous, so `value_at(k)`
//! for a knot `k` includes the jump at `k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    knots: Vec<f64>,
    values: Vec<f64>,
    pre_value: f64,
}

impl StepFunction {
    /// Build from knots (strictly increasing) and the values attained at them.
    pub fn new(knots: Vec<f64>, values: Vec<f64>, pre_value: f64) -> Result<Self> {
        if knots.len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} knots vs {} values",
                knots.len(),
                values.len()
            )));
        }
        if knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(
                "step-function knots must be strictly increasing".into(),
            ));
        }
        if knots.iter().chain(values.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(
                "step-function knots and values must be finite".into(),
            ));
        }
        Ok(Self {
            knots,
            values,
            pre_value,
        })
    }

    /// A function with no jumps, equal to `value` everywhere.
    pub fn constant(value: f64) -> Self {
        Self {
            knots: Vec::new(),
            values: Vec::new(),
            pre_value: value,
        }
    }

    /// Build a cumulative function (pre-value 0) from `(knot, increment)` pairs.
    pub fn from_jumps(jumps: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let mut knots = Vec::new();
        let mut values = Vec::new();
        let mut total = 0.0;
        for (t, dv) in jumps {
            total += dv;
            knots.push(t);
            values.push(total);
        }
        Self::new(knots, values, 0.0)
    }

    /// Right-continuous evaluation: the value at the last knot `<= t`, or the
    /// pre-value when `t` precedes every knot.
    pub fn value_at(&self, t: f64) -> f64 {
        match self.knots.partition_point(|&k| k <= t) {
            0 => self.pre_value,
            i => self.values[i - 1],
        }
    }

    /// Left limit at `t`: the value attained strictly before `t`.
    pub fn value_before(&self, t: f64) -> f64 {
        match self.knots.partition_point(|&k| k < t) {
            0 => self.pre_value,
            i => self.values[i - 1],
        }
    }

    /// Jump size at `t` (zero when `t` is not a knot).
    pub fn jump_at(&self, t: f64) -> f64 {
        self.value_at(t) - self.value_before(t)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pre_value(&self) -> f64 {
        self.pre_value
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    /// Knots lying in the half-open window `(lo, hi]`.
    pub fn knots_in(&self, lo: f64, hi: f64) -> &[f64] {
        let a = self.knots.partition_point(|&k| k <= lo);
        let b = self.knots.partition_point(|&k| k <= hi);
        &self.knots[a..b]
    }

    /// True when the values (including the pre-value) never decrease.
    pub fn is_nondecreasing(&self) -> bool {
        let mut prev = self.pre_value;
        self.values.iter().all(|&v| {
            let ok = v >= prev;
            prev = v;
            ok
        })
    }

    /// Restrict to values at the given strictly increasing query times.
    pub fn sampled_at(&self, times: &[f64]) -> Result<Self> {
        let values = times.iter().map(|&t| self.value_at(t)).collect();
        Self::new(times.to_vec(), values, self.pre_value)
    }

    /// Piecewise-linear interpolation onto a new grid. The interpolant passes
    /// through `(knot, value)` at every original knot and is flat outside the
    /// knot range. Used to put a coarsely recalibrated cumulative hazard onto
    /// a fine (e.g. annual) grid before absolute-risk summation.
    pub fn linear_interp_at(&self, t: f64) -> f64 {
        if self.knots.is_empty() {
            return self.pre_value;
        }
        let i = self.knots.partition_point(|&k| k <= t);
        if i == 0 {
            return self.pre_value;
        }
        if i == self.knots.len() {
            return self.values[i - 1];
        }
        let (t0, v0) = (self.knots[i - 1], self.values[i - 1]);
        let (t1, v1) = (self.knots[i], self.values[i]);
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }
}
