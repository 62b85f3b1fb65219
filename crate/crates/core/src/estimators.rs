//! Marginal survival estimation: Kaplan-Meier, the Cox model for death with a
//! Breslow baseline, and the nonparametric event-free survival among the
//! living, `S_T(t | Y > t, Z = z)`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numeric::{newton_maximize, NewtonOptions, Quadratic};
use crate::survdata::{Arm, Dataset};

/// Right-continuous piecewise-constant function on `[0, inf)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    knots: Vec<f64>,
    values: Vec<f64>,
    before: f64,
}

impl StepFunction {
    /// `values[k]` holds on `[knots[k], knots[k + 1])`; `before` holds left
    /// of the first knot. Knots must be strictly increasing.
    pub fn new(knots: Vec<f64>, values: Vec<f64>, before: f64) -> Self {
        assert_eq!(knots.len(), values.len(), "knots/values length mismatch");
        assert!(
            knots.windows(2).all(|w| w[0] < w[1]),
            "knots must be strictly increasing"
        );
        StepFunction {
            knots,
            values,
            before,
        }
    }

    pub fn constant(value: f64) -> Self {
        StepFunction::new(Vec::new(), Vec::new(), value)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_before_first_knot(&self) -> f64 {
        self.before
    }

    /// Value at `t` (right-continuous).
    pub fn eval(&self, t: f64) -> f64 {
        match self.knots.partition_point(|&k| k <= t) {
            0 => self.before,
            k => self.values[k - 1],
        }
    }

    /// Left limit `f(t-)`.
    pub fn left_limit(&self, t: f64) -> f64 {
        match self.knots.partition_point(|&k| k < t) {
            0 => self.before,
            k => self.values[k - 1],
        }
    }

    /// Average of the left limit and the value at `t`.
    pub fn midpoint(&self, t: f64) -> f64 {
        0.5 * (self.left_limit(t) + self.eval(t))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> StepFunction {
        StepFunction {
            knots: self.knots.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            before: f(self.before),
        }
    }

    pub fn is_non_increasing(&self) -> bool {
        std::iter::once(self.before)
            .chain(self.values.iter().copied())
            .collect::<Vec<_>>()
            .windows(2)
            .all(|w| w[1] <= w[0])
    }

    pub fn is_non_decreasing(&self) -> bool {
        std::iter::once(self.before)
            .chain(self.values.iter().copied())
            .collect::<Vec<_>>()
            .windows(2)
            .all(|w| w[1] >= w[0])
    }

    /// Two-column `knot,value` CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["knot", "value"])?;
        wtr.write_record(["0".to_string(), self.eval(0.0).to_string()])?;
        for (k, v) in self.knots.iter().zip(&self.values) {
            if *k > 0.0 {
                wtr.write_record([k.to_string(), v.to_string()])?;
            }
        }
        wtr.flush().map_err(|source| Error::Io {
            path: "<writer>".into(),
            source,
        })?;
        Ok(())
    }
}

/// Kaplan-Meier product-limit estimator from `(time, event)` pairs.
pub fn km_survival(times: &[(f64, bool)]) -> Result<StepFunction> {
    if times.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(&(t, _)) = times.iter().find(|(t, _)| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::InvalidParameter(format!("invalid time {t}")));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut knots = Vec::new();
    let mut values = Vec::new();
    let mut surv = 1.0;
    let mut at_risk = sorted.len();
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        let mut deaths = 0;
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == t {
            deaths += usize::from(sorted[j].1);
            j += 1;
        }
        if deaths > 0 {
            surv *= 1.0 - deaths as f64 / at_risk as f64;
            knots.push(t);
            values.push(surv);
        }
        at_risk -= j - i;
        i = j;
    }
    Ok(StepFunction::new(knots, values, 1.0))
}

/// Cox model for death time with Breslow ties and baseline.
#[derive(Debug, Clone)]
pub struct CoxDeathFit {
    pub beta_death: Vec<f64>,
    pub baseline_cumhaz: StepFunction,
    pub converged: bool,
    pub iterations: usize,
}

impl CoxDeathFit {
    /// `S_Y(t | z) = exp(-exp(beta' z) L0(t))` for regression vector `z`.
    pub fn survival(&self, z: &[f64]) -> StepFunction {
        let lp: f64 = self.beta_death.iter().zip(z).map(|(b, x)| b * x).sum();
        let hr = lp.exp();
        self.baseline_cumhaz.map(|h| (-hr * h).exp())
    }

    /// Death survival for an arm with covariates at zero.
    pub fn arm_survival(&self, arm: Arm) -> StepFunction {
        let mut z = vec![0.0; self.beta_death.len()];
        z[0] = f64::from(arm.indicator());
        self.survival(&z)
    }
}

/// Breslow partial likelihood for right-censored times, evaluated by a
/// reverse sweep over follow-up times.
struct BreslowProblem {
    /// Indices sorted by decreasing time.
    order: Vec<usize>,
    times: Vec<f64>,
    status: Vec<bool>,
    z: Vec<Vec<f64>>,
}

impl BreslowProblem {
    fn eval(&self, beta: &DVector<f64>) -> Quadratic {
        let p = beta.len();
        let mut value = 0.0;
        let mut grad = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        let mut s0 = 0.0;
        let mut s1 = DVector::zeros(p);
        let mut s2 = DMatrix::zeros(p, p);
        let mut k = 0;
        while k < self.order.len() {
            let t = self.times[self.order[k]];
            let mut j = k;
            // add everyone with time == t to the risk sums first
            while j < self.order.len() && self.times[self.order[j]] == t {
                let i = self.order[j];
                let zi = DVector::from_column_slice(&self.z[i]);
                let w = beta.dot(&zi).exp();
                s0 += w;
                s1.axpy(w, &zi, 1.0);
                s2.ger(w, &zi, &zi, 1.0);
                j += 1;
            }
            let mut deaths = 0.0;
            for &i in &self.order[k..j] {
                if self.status[i] {
                    let zi = DVector::from_column_slice(&self.z[i]);
                    value += beta.dot(&zi);
                    grad += &zi;
                    deaths += 1.0;
                }
            }
            if deaths > 0.0 {
                let mean = &s1 / s0;
                value -= deaths * s0.ln();
                grad.axpy(-deaths, &mean, 1.0);
                info += (&s2 / s0 - &mean * mean.transpose()) * deaths;
            }
            k = j;
        }
        Quadratic {
            value,
            gradient: grad,
            information: info,
        }
    }
}

fn cox_death_with_design(ds: &Dataset, z: Vec<Vec<f64>>) -> Result<CoxDeathFit> {
    if ds.n_deaths() == 0 {
        return Err(Error::NoDeaths);
    }
    ds.require_both_arms()?;
    let times: Vec<f64> = ds.records().iter().map(|r| r.followup_time).collect();
    let status: Vec<bool> = ds.records().iter().map(|r| r.died()).collect();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let p = z[0].len();
    let problem = BreslowProblem {
        order,
        times,
        status,
        z,
    };
    let outcome = newton_maximize(|b| problem.eval(b), DVector::zeros(p), NewtonOptions::default())?;
    let beta = outcome.beta;

    // Breslow baseline: increments d_k / sum_{time_i >= s_k} exp(beta' z_i)
    let mut increments: Vec<(f64, f64)> = Vec::new();
    let mut s0 = 0.0;
    let order = &problem.order;
    let mut k = 0;
    while k < order.len() {
        let t = problem.times[order[k]];
        let mut j = k;
        let mut deaths = 0.0;
        while j < order.len() && problem.times[order[j]] == t {
            let i = order[j];
            s0 += beta.dot(&DVector::from_column_slice(&problem.z[i])).exp();
            if problem.status[i] {
                deaths += 1.0;
            }
            j += 1;
        }
        if deaths > 0.0 {
            increments.push((t, deaths / s0));
        }
        k = j;
    }
    increments.reverse();
    let mut cum = 0.0;
    let (knots, values): (Vec<f64>, Vec<f64>) = increments
        .into_iter()
        .map(|(t, dh)| {
            cum += dh;
            (t, cum)
        })
        .unzip();
    Ok(CoxDeathFit {
        beta_death: beta.iter().copied().collect(),
        baseline_cumhaz: StepFunction::new(knots, values, 0.0),
        converged: outcome.converged,
        iterations: outcome.iterations,
    })
}

/// Cox model for death on treatment and all covariates.
pub fn fit_cox_death(ds: &Dataset) -> Result<CoxDeathFit> {
    let z = (0..ds.len()).map(|i| ds.design_row(i)).collect();
    cox_death_with_design(ds, z)
}

/// Cox model for death on treatment alone.
pub fn fit_cox_death_by_arm(ds: &Dataset) -> Result<CoxDeathFit> {
    let z = ds
        .records()
        .iter()
        .map(|r| vec![f64::from(r.arm.indicator())])
        .collect();
    cox_death_with_design(ds, z)
}

/// Event-free survival among the living in one arm. At each `t` this is the
/// share of subjects still under observation (`followup > t`) who have had
/// no non-fatal event by `t`. Once nobody remains under observation the
/// curve stays at its last value.
pub fn event_free_survival(ds: &Dataset, arm: Arm) -> Result<StepFunction> {
    let members: Vec<_> = ds.records().iter().filter(|r| r.arm == arm).collect();
    if members.is_empty() {
        return Err(Error::EmptyArm(arm.indicator()));
    }
    let mut change_points: Vec<f64> = members
        .iter()
        .flat_map(|r| std::iter::once(r.followup_time).chain(r.event_time))
        .collect();
    change_points.sort_by(f64::total_cmp);
    change_points.dedup();

    let ratio_at = |t: f64| -> Option<f64> {
        let observed = members.iter().filter(|r| r.followup_time > t);
        let (mut num, mut den) = (0usize, 0usize);
        for r in observed {
            den += 1;
            if r.event_time.is_none_or(|e| e > t) {
                num += 1;
            }
        }
        (den > 0).then(|| num as f64 / den as f64)
    };

    let mut knots = Vec::new();
    let mut values = Vec::new();
    let mut last = 1.0;
    for &t in &change_points {
        let v = ratio_at(t).unwrap_or(last);
        if t == 0.0 {
            // value at the origin is 1 by definition
            last = 1.0;
            continue;
        }
        knots.push(t);
        values.push(v);
        last = v;
    }
    Ok(StepFunction::new(knots, values, 1.0))
}
