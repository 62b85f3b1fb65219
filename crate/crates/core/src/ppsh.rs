//! The PPSH estimator: a Cox-type partial likelihood in which every at-risk
//! subject enters with its principal stratum probability and every event
//! term is scaled by the event subject's own probability.
//!
//! With weights `p_ij`, the score is `U*(b) = sum_j p_(j)j W_j` where
//! `W_j = Z_(j) - sum p_ij Z_i e^{b'Z_i} / sum p_ij e^{b'Z_i}` over the risk
//! set, and the information is the matching `p_(j)j`-scaled weighted
//! covariance. Tied events each contribute a term (Breslow).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::frailty_ps::{build_ps_weights, FrailtyGamma, PsWeightTable};
use crate::numeric::{newton_maximize, quantile_sorted, NewtonOptions, Quadratic};
use crate::survdata::Dataset;

/// Weighted partial likelihood bound to a dataset and weight table.
pub struct WeightedPartialLikelihood<'a> {
    design: Vec<DVector<f64>>,
    table: &'a PsWeightTable,
}

impl<'a> WeightedPartialLikelihood<'a> {
    /// Checks that the table covers every observed event of `ds`.
    pub fn new(ds: &Dataset, table: &'a PsWeightTable) -> Result<Self> {
        let groups = ds.event_times();
        for g in &groups {
            let covered = table
                .sets
                .iter()
                .find(|s| s.time == g.time)
                .is_some_and(|s| {
                    g.subjects
                        .iter()
                        .all(|i| s.event_positions.iter().any(|&p| s.members[p] == *i))
                });
            if !covered {
                return Err(Error::MissingWeights(g.time));
            }
        }
        let design = (0..ds.len())
            .map(|i| DVector::from_vec(ds.design_row(i)))
            .collect();
        Ok(WeightedPartialLikelihood { design, table })
    }

    pub fn dim(&self) -> usize {
        self.design.first().map_or(1, |z| z.len())
    }

    /// Log partial likelihood, score and information at `beta`.
    pub fn eval(&self, beta: &DVector<f64>) -> Quadratic {
        let p = beta.len();
        let mut value = 0.0;
        let mut gradient = DVector::zeros(p);
        let mut information = DMatrix::zeros(p, p);
        for set in &self.table.sets {
            let (s0, mean, cov) = self.risk_moments(set, beta);
            for &pos in &set.event_positions {
                let pj = set.weights[pos];
                if pj == 0.0 {
                    continue;
                }
                let z = &self.design[set.members[pos]];
                value += pj * (beta.dot(z) - s0.ln());
                gradient += (z - &mean) * pj;
                information += &cov * pj;
            }
        }
        Quadratic {
            value,
            gradient,
            information,
        }
    }

    /// Weighted sum, mean and covariance of the design over a risk set.
    fn risk_moments(
        &self,
        set: &crate::frailty_ps::RiskSetWeights,
        beta: &DVector<f64>,
    ) -> (f64, DVector<f64>, DMatrix<f64>) {
        let p = beta.len();
        let mut s0 = 0.0;
        let mut s1 = DVector::zeros(p);
        let mut s2 = DMatrix::zeros(p, p);
        for (&i, &w) in set.members.iter().zip(&set.weights) {
            if w == 0.0 {
                continue;
            }
            let z = &self.design[i];
            let r = w * beta.dot(z).exp();
            s0 += r;
            s1.axpy(r, z, 1.0);
            s2.ger(r, z, z, 1.0);
        }
        if s0 == 0.0 {
            return (0.0, DVector::zeros(p), DMatrix::zeros(p, p));
        }
        let mean = s1 / s0;
        let cov = s2 / s0 - &mean * mean.transpose();
        (s0, mean, cov)
    }

    /// Per-event `(time, p_(j)j, Z_(j) - Zbar, V_j)` at `beta`, in event
    /// order (tied events listed separately).
    pub fn event_terms(&self, beta: &DVector<f64>) -> Vec<EventTerm> {
        let mut out = Vec::new();
        for set in &self.table.sets {
            let (_, mean, cov) = self.risk_moments(set, beta);
            for &pos in &set.event_positions {
                let pj = set.weights[pos];
                let z = &self.design[set.members[pos]];
                out.push(EventTerm {
                    time: set.time,
                    weight: pj,
                    centered: z - &mean,
                    variance: &cov * pj,
                });
            }
        }
        out
    }
}

/// Contribution of one event to the score and information.
#[derive(Debug, Clone)]
pub struct EventTerm {
    pub time: f64,
    /// The event subject's own principal stratum probability.
    pub weight: f64,
    /// `Z_(j) - Zbar(t_j; beta)`.
    pub centered: DVector<f64>,
    /// `V(t_j; beta)`, already scaled by `weight`.
    pub variance: DMatrix<f64>,
}

pub fn weighted_score(ds: &Dataset, weights: &PsWeightTable, beta: &[f64]) -> Result<Vec<f64>> {
    let pl = WeightedPartialLikelihood::new(ds, weights)?;
    Ok(pl.eval(&DVector::from_column_slice(beta)).gradient.iter().copied().collect())
}

pub fn information(ds: &Dataset, weights: &PsWeightTable, beta: &[f64]) -> Result<DMatrix<f64>> {
    let pl = WeightedPartialLikelihood::new(ds, weights)?;
    Ok(pl.eval(&DVector::from_column_slice(beta)).information)
}

pub fn weighted_log_pl(ds: &Dataset, weights: &PsWeightTable, beta: &[f64]) -> Result<f64> {
    let pl = WeightedPartialLikelihood::new(ds, weights)?;
    Ok(pl.eval(&DVector::from_column_slice(beta)).value)
}

#[derive(Debug, Clone)]
pub struct PpshFit {
    /// Treatment coefficient first, then covariates.
    pub beta: Vec<f64>,
    pub information: DMatrix<f64>,
    pub log_pl: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl PpshFit {
    pub fn treatment_effect(&self) -> f64 {
        self.beta[0]
    }

    pub fn hazard_ratio(&self) -> f64 {
        self.beta[0].exp()
    }
}

/// Newton-Raphson from `init` (zero by default) until the score max-norm is
/// below 1e-8.
pub fn fit_ppsh(ds: &Dataset, weights: &PsWeightTable, init: Option<&[f64]>) -> Result<PpshFit> {
    if ds.n_events() == 0 {
        return Err(Error::NoEvents);
    }
    ds.require_both_arms()?;
    let pl = WeightedPartialLikelihood::new(ds, weights)?;
    let p = ds.design_dim();
    let start = match init {
        Some(b) if b.len() == p => DVector::from_column_slice(b),
        Some(b) => {
            return Err(Error::InvalidParameter(format!(
                "initial beta has length {}, expected {p}",
                b.len()
            )))
        }
        None => DVector::zeros(p),
    };
    let outcome = newton_maximize(|b| pl.eval(b), start, NewtonOptions::default())?;
    Ok(PpshFit {
        beta: outcome.beta.iter().copied().collect(),
        information: outcome.at.information,
        log_pl: outcome.at.value,
        iterations: outcome.iterations,
        converged: outcome.converged,
    })
}

/// Cause-specific Cox fit: every weight one, death treated as censoring.
pub fn fit_cause_specific(ds: &Dataset) -> Result<PpshFit> {
    fit_ppsh(ds, &PsWeightTable::unit(ds), None)
}

/// Full gamma-frailty pipeline: marginals, weights, weighted fit.
pub fn estimate_ppsh(ds: &Dataset, frailty: FrailtyGamma) -> Result<PpshFit> {
    let weights = build_ps_weights(ds, frailty)?;
    fit_ppsh(ds, &weights, None)
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapResult {
    /// Treatment coefficient of each converged replicate, in replicate order.
    pub estimates: Vec<f64>,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub requested: usize,
    /// Replicates that failed or did not converge.
    pub dropped: usize,
}

/// Percentile interval from bootstrap estimates with linearly interpolated
/// empirical quantiles at `(1 - level) / 2` and `(1 + level) / 2`.
pub fn percentile_interval(estimates: &[f64], level: f64) -> Result<(f64, f64)> {
    if estimates.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("level {level} outside (0, 1)")));
    }
    let mut sorted = estimates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok((
        quantile_sorted(&sorted, alpha / 2.0),
        quantile_sorted(&sorted, 1.0 - alpha / 2.0),
    ))
}

/// Random stream for bootstrap replicate `r` under a master seed.
pub fn replicate_rng(seed: u64, r: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r);
    rng
}

/// Draws a same-size resample with replacement; every drawn record gets a
/// fresh id.
pub fn resample(ds: &Dataset, rng: &mut impl Rng) -> Dataset {
    let n = ds.len();
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    ds.resample(&idx, "boot")
}

/// Runs `statistic` on `b` resamples in parallel. Entry `r` is `None` when
/// replicate `r` failed.
pub fn bootstrap_statistic<F>(ds: &Dataset, b: usize, seed: u64, statistic: F) -> Vec<Option<f64>>
where
    F: Fn(&Dataset) -> Option<f64> + Sync,
{
    (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r as u64);
            let sample = resample(ds, &mut rng);
            statistic(&sample)
        })
        .collect()
}

/// Summarizes replicate estimates into a percentile interval, requiring at
/// least half of them to have succeeded.
pub fn summarize_bootstrap(draws: &[Option<f64>], level: f64) -> Result<BootstrapResult> {
    let requested = draws.len();
    let estimates: Vec<f64> = draws.iter().flatten().copied().collect();
    if estimates.len() < requested.div_ceil(2) || estimates.is_empty() {
        return Err(Error::TooFewReplicates {
            converged: estimates.len(),
            requested,
        });
    }
    let (ci_low, ci_high) = percentile_interval(&estimates, level)?;
    Ok(BootstrapResult {
        dropped: requested - estimates.len(),
        estimates,
        ci_low,
        ci_high,
        level,
        requested,
    })
}

/// Percentile bootstrap CI for the treatment coefficient. Each replicate
/// reruns the whole pipeline on a resample; non-converged replicates are
/// dropped and counted.
pub fn bootstrap_ci(
    ds: &Dataset,
    frailty: FrailtyGamma,
    b: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    if b < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 replicates, got {b}")));
    }
    let draws = bootstrap_statistic(ds, b, seed, |sample| {
        estimate_ppsh(sample, frailty)
            .ok()
            .filter(|f| f.converged)
            .map(|f| f.treatment_effect())
    });
    summarize_bootstrap(&draws, level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survdata::{Arm, SubjectRecord};

    fn symmetric() -> Dataset {
        let mut recs = Vec::new();
        for (k, (d, e)) in [(3.0, Some(1.0)), (4.0, Some(2.5)), (5.0, None), (2.0, None)]
            .iter()
            .enumerate()
        {
            recs.push(SubjectRecord::new(format!("c{k}"), Arm::Control, *d, *e, false));
            recs.push(SubjectRecord::new(format!("t{k}"), Arm::Treated, *d, *e, false));
        }
        Dataset::new(recs).unwrap()
    }

    #[test]
    fn symmetric_data_zero_score_and_estimate() {
        let ds = symmetric();
        let w = PsWeightTable::unit(&ds);
        let u = weighted_score(&ds, &w, &[0.0]).unwrap();
        assert!(u[0].abs() < 1e-14);
        let fit = fit_ppsh(&ds, &w, None).unwrap();
        assert!(fit.converged);
        assert!(fit.beta[0].abs() < 1e-8);
    }

    #[test]
    fn zero_event_weight_annihilates_term() {
        let ds = Dataset::new(vec![
            SubjectRecord::new("a", Arm::Treated, 3.0, Some(1.0), false),
            SubjectRecord::new("b", Arm::Control, 3.0, None, false),
        ])
        .unwrap();
        let w = PsWeightTable::build(&ds, |_, _, ev| Ok((if ev { 0.0 } else { 0.7 }, 1))).unwrap();
        assert_eq!(weighted_score(&ds, &w, &[0.3]).unwrap(), vec![0.0]);
    }

    #[test]
    fn single_member_risk_set_has_zero_variance() {
        let ds = Dataset::new(vec![
            SubjectRecord::new("a", Arm::Treated, 3.0, Some(2.0), false),
            SubjectRecord::new("b", Arm::Control, 1.0, None, false),
        ])
        .unwrap();
        let w = PsWeightTable::unit(&ds);
        let info = information(&ds, &w, &[0.4]).unwrap();
        assert!(info[(0, 0)].abs() < 1e-15);
    }

    #[test]
    fn missing_event_in_table_is_an_error() {
        let ds = symmetric();
        let mut w = PsWeightTable::unit(&ds);
        w.sets.pop();
        assert!(matches!(
            weighted_score(&ds, &w, &[0.0]),
            Err(Error::MissingWeights(_))
        ));
    }

    #[test]
    fn no_events_is_an_error() {
        let ds = Dataset::new(vec![
            SubjectRecord::new("a", Arm::Treated, 3.0, None, false),
            SubjectRecord::new("b", Arm::Control, 1.0, None, true),
        ])
        .unwrap();
        assert!(matches!(fit_cause_specific(&ds), Err(Error::NoEvents)));
    }

    #[test]
    fn percentile_rule_on_forced_estimates() {
        let est: Vec<f64> = (1..=100).rev().map(f64::from).collect();
        let (lo, hi) = percentile_interval(&est, 0.95).unwrap();
        assert!((lo - 3.475).abs() < 1e-12);
        assert!((hi - 97.525).abs() < 1e-12);
    }

    #[test]
    fn too_few_successes() {
        let draws = vec![Some(1.0), None, None, None];
        assert!(matches!(
            summarize_bootstrap(&draws, 0.95),
            Err(Error::TooFewReplicates { converged: 1, requested: 4 })
        ));
        let draws = vec![Some(1.0), Some(2.0), None, None];
        let r = summarize_bootstrap(&draws, 0.95).unwrap();
        assert_eq!(r.dropped, 2);
    }
}
