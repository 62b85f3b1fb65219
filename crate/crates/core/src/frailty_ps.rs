//! Principal stratum probabilities under a shared gamma frailty.
//!
//! With `theta ~ Gamma(gamma, gamma)` the marginal survival curves of death
//! and of the non-fatal event among the living transform in closed form into
//! conditional cumulative hazards at `theta = 1`. Those give, for each
//! subject at risk at an event time, the probability of surviving that time
//! under the counterfactual arm given the subject's own history.

use std::io::Write;

use crate::error::{Error, Result};
use crate::estimators::{event_free_survival, fit_cox_death_by_arm, StepFunction};
use crate::survdata::{Arm, Dataset};

/// Gamma frailty with mean 1 and variance `1 / gamma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrailtyGamma(f64);

impl FrailtyGamma {
    pub fn new(gamma: f64) -> Result<Self> {
        if gamma.is_finite() && gamma > 0.0 {
            Ok(FrailtyGamma(gamma))
        } else {
            Err(Error::InvalidParameter(format!(
                "frailty gamma must be positive and finite, got {gamma}"
            )))
        }
    }

    pub fn gamma(self) -> f64 {
        self.0
    }

    /// Marginal survival `(gamma / (gamma + eta))^gamma` of a conditional
    /// cumulative hazard.
    pub fn marginal_survival(self, eta: f64) -> f64 {
        let g = self.0;
        (-g * (eta / g).ln_1p()).exp()
    }
}

/// The sensitivity grid used when no gamma is given.
pub const DEFAULT_GAMMA_GRID: [f64; 6] = [0.25, 0.5, 1.0, 2.0, 5.0, 10.0];

fn check_survival(s: f64) -> Result<()> {
    if s > 1.0 || s.is_nan() {
        Err(Error::InvalidParameter(format!(
            "survival value {s} outside (0, 1]"
        )))
    } else {
        Ok(())
    }
}

/// `gamma * (S^(-1/gamma) - 1)`; zero survival maps to `+inf`.
pub fn eta_death(s: f64, frailty: FrailtyGamma) -> Result<f64> {
    check_survival(s)?;
    if s <= 0.0 {
        return Ok(f64::INFINITY);
    }
    let g = frailty.gamma();
    Ok(g * (-s.ln() / g).exp_m1())
}

/// `(gamma + eta_Y) * (S_cond^(-1/gamma) - 1)` for the event among the living.
pub fn eta_event(s_cond: f64, eta_y_same_arm: f64, frailty: FrailtyGamma) -> Result<f64> {
    check_survival(s_cond)?;
    if eta_y_same_arm < 0.0 || eta_y_same_arm.is_nan() {
        return Err(Error::InvalidParameter(format!(
            "conditional death hazard {eta_y_same_arm} must be >= 0"
        )));
    }
    if s_cond <= 0.0 {
        return Ok(f64::INFINITY);
    }
    if s_cond == 1.0 {
        return Ok(0.0);
    }
    let g = frailty.gamma();
    Ok((g + eta_y_same_arm) * (-s_cond.ln() / g).exp_m1())
}

/// Case of an at-risk subject at an event time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrailtyCase {
    /// The subject's non-fatal event is at this time.
    Event,
    /// The subject is still event-free.
    EventFree,
}

impl FrailtyCase {
    pub fn number(self) -> u8 {
        match self {
            FrailtyCase::Event => 1,
            FrailtyCase::EventFree => 2,
        }
    }
}

/// `[(gamma + eta_T) / (gamma + eta_Ycf + eta_T)]^(gamma + 1)` for the event
/// case and exponent `gamma` otherwise.
pub fn ps_probability(
    case: FrailtyCase,
    eta_t_own_arm: f64,
    eta_y_counterfactual: f64,
    frailty: FrailtyGamma,
) -> Result<f64> {
    if eta_t_own_arm < 0.0 || eta_y_counterfactual < 0.0 || eta_t_own_arm.is_nan() || eta_y_counterfactual.is_nan() {
        return Err(Error::InvalidParameter(format!(
            "hazards must be >= 0 (eta_T = {eta_t_own_arm}, eta_Y = {eta_y_counterfactual})"
        )));
    }
    if eta_y_counterfactual.is_infinite() {
        return Ok(0.0);
    }
    if eta_y_counterfactual == 0.0 {
        return Ok(1.0);
    }
    let g = frailty.gamma();
    let exponent = match case {
        FrailtyCase::Event => g + 1.0,
        FrailtyCase::EventFree => g,
    };
    // log of the base is -log1p(eta_Y / (gamma + eta_T))
    let log_base = -(eta_y_counterfactual / (g + eta_t_own_arm)).ln_1p();
    Ok((exponent * log_base).exp().clamp(0.0, 1.0))
}

/// How marginal curves are read at an event time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CurveEvaluation {
    /// `f(t_j-)`: the event at `t_j` does not inform its own weight.
    #[default]
    LeftLimit,
    /// `f(t_j)`.
    Inclusive,
}

impl CurveEvaluation {
    pub fn at(self, f: &StepFunction, t: f64) -> f64 {
        match self {
            CurveEvaluation::LeftLimit => f.left_limit(t),
            CurveEvaluation::Inclusive => f.eval(t),
        }
    }
}

/// Conditional cumulative hazards at `theta = 1`, per arm.
#[derive(Debug, Clone)]
pub struct ConditionalHazards {
    pub eta_y: [StepFunction; 2],
    pub eta_t: [StepFunction; 2],
}

fn merged_knots(a: &StepFunction, b: &StepFunction) -> Vec<f64> {
    let mut k: Vec<f64> = a.knots().iter().chain(b.knots()).copied().collect();
    k.sort_by(f64::total_cmp);
    k.dedup();
    k
}

impl ConditionalHazards {
    /// Transforms per-arm death survival and event-free survival among the
    /// living into conditional hazards.
    pub fn from_marginals(
        death_survival: &[StepFunction; 2],
        event_free: &[StepFunction; 2],
        frailty: FrailtyGamma,
    ) -> Result<Self> {
        let mut eta_y = Vec::with_capacity(2);
        let mut eta_t = Vec::with_capacity(2);
        for z in 0..2 {
            let sy = &death_survival[z];
            let st = &event_free[z];
            let knots = merged_knots(sy, st);
            let at = |t: Option<f64>| -> Result<(f64, f64)> {
                let (s_y, s_t) = match t {
                    Some(t) => (sy.eval(t), st.eval(t)),
                    None => (sy.value_before_first_knot(), st.value_before_first_knot()),
                };
                let h_y = eta_death(s_y, frailty)?;
                Ok((h_y, eta_event(s_t, h_y, frailty)?))
            };
            let (y0, t0) = at(None)?;
            let mut yv = Vec::with_capacity(knots.len());
            let mut tv = Vec::with_capacity(knots.len());
            for &k in &knots {
                let (hy, ht) = at(Some(k))?;
                yv.push(hy);
                tv.push(ht);
            }
            eta_y.push(StepFunction::new(knots.clone(), yv, y0));
            eta_t.push(StepFunction::new(knots, tv, t0));
        }
        let [y0, y1]: [StepFunction; 2] = eta_y.try_into().expect("two arms");
        let [t0, t1]: [StepFunction; 2] = eta_t.try_into().expect("two arms");
        Ok(ConditionalHazards {
            eta_y: [y0, y1],
            eta_t: [t0, t1],
        })
    }

    /// Fits the marginals on `ds` (Cox model for death on treatment, and the
    /// nonparametric event-free survival) and transforms them.
    pub fn estimate(ds: &Dataset, frailty: FrailtyGamma) -> Result<Self> {
        let (death, event_free) = estimate_marginals(ds)?;
        Self::from_marginals(&death, &event_free, frailty)
    }
}

/// Per-arm death survival and event-free survival among the living. With no
/// deaths at all the death curves are identically one.
pub fn estimate_marginals(ds: &Dataset) -> Result<([StepFunction; 2], [StepFunction; 2])> {
    ds.require_both_arms()?;
    let death = if ds.n_deaths() == 0 {
        [StepFunction::constant(1.0), StepFunction::constant(1.0)]
    } else {
        let fit = fit_cox_death_by_arm(ds)?;
        [fit.arm_survival(Arm::Control), fit.arm_survival(Arm::Treated)]
    };
    let event_free = [
        event_free_survival(ds, Arm::Control)?,
        event_free_survival(ds, Arm::Treated)?,
    ];
    Ok((death, event_free))
}

/// Weighted at-risk set at one distinct event time.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskSetWeights {
    pub time: f64,
    /// Record indices of the at-risk subjects.
    pub members: Vec<usize>,
    /// Principal stratum probability of each member.
    pub weights: Vec<f64>,
    /// Case label of each member (1 = event at this time; see the
    /// estimators producing the table for the others).
    pub cases: Vec<u8>,
    /// Positions within `members` of the subjects whose event is at `time`.
    pub event_positions: Vec<usize>,
}

/// Principal stratum probabilities for every at-risk subject at every event
/// time. Tied events share one entry; each tied event contributes its own
/// term downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct PsWeightTable {
    pub sets: Vec<RiskSetWeights>,
}

impl PsWeightTable {
    /// Builds the table by calling `weight(time, record, is_event)` for each
    /// at-risk subject; the closure returns `(p, case)`.
    pub fn build<F>(ds: &Dataset, mut weight: F) -> Result<Self>
    where
        F: FnMut(f64, usize, bool) -> Result<(f64, u8)>,
    {
        let mut sets = Vec::new();
        for group in ds.event_times() {
            let members = ds.risk_set(group.time);
            let mut weights = Vec::with_capacity(members.len());
            let mut cases = Vec::with_capacity(members.len());
            let mut event_positions = Vec::with_capacity(group.subjects.len());
            for (pos, &i) in members.iter().enumerate() {
                let is_event = ds.records()[i].event_time == Some(group.time);
                if is_event {
                    event_positions.push(pos);
                }
                let (p, case) = weight(group.time, i, is_event)?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidParameter(format!(
                        "weight {p} for subject {} at {} outside [0, 1]",
                        ds.records()[i].id,
                        group.time
                    )));
                }
                weights.push(p);
                cases.push(case);
            }
            sets.push(RiskSetWeights {
                time: group.time,
                members,
                weights,
                cases,
                event_positions,
            });
        }
        Ok(PsWeightTable { sets })
    }

    /// Every weight equal to one: the plain Cox partial likelihood for the
    /// non-fatal event with death treated as censoring.
    pub fn unit(ds: &Dataset) -> Self {
        PsWeightTable::build(ds, |_, _, is_event| Ok((1.0, if is_event { 1 } else { 2 })))
            .expect("unit weights are valid")
    }

    pub fn n_events(&self) -> usize {
        self.sets.iter().map(|s| s.event_positions.len()).sum()
    }

    /// Weight of record `i` at distinct event index `j`, if at risk.
    pub fn weight_of(&self, j: usize, i: usize) -> Option<f64> {
        let set = self.sets.get(j)?;
        set.members
            .iter()
            .position(|&m| m == i)
            .map(|pos| set.weights[pos])
    }

    /// Long-form CSV: `event_index,t_j,subject_id,case,p_ij`, one block per
    /// event (tied events repeat their shared risk set).
    pub fn write_csv<W: Write>(&self, ds: &Dataset, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["event_index", "t_j", "subject_id", "case", "p_ij"])?;
        let mut event_index = 0usize;
        for set in &self.sets {
            for _ in &set.event_positions {
                event_index += 1;
                for ((&i, &p), &case) in set.members.iter().zip(&set.weights).zip(&set.cases) {
                    wtr.write_record([
                        event_index.to_string(),
                        set.time.to_string(),
                        ds.records()[i].id.clone(),
                        case.to_string(),
                        p.to_string(),
                    ])?;
                }
            }
        }
        wtr.flush().map_err(|source| Error::Io {
            path: "<writer>".into(),
            source,
        })?;
        Ok(())
    }
}

/// Gamma-frailty principal stratum weights from hazards already in hand.
pub fn ps_weights_from_hazards(
    ds: &Dataset,
    hazards: &ConditionalHazards,
    frailty: FrailtyGamma,
    evaluation: CurveEvaluation,
) -> Result<PsWeightTable> {
    let mut cache: Option<(f64, [f64; 2], [f64; 2])> = None;
    PsWeightTable::build(ds, |t, i, is_event| {
        let (eta_y, eta_t) = match cache {
            Some((ct, ey, et)) if ct == t => (ey, et),
            _ => {
                let ey = [
                    evaluation.at(&hazards.eta_y[0], t),
                    evaluation.at(&hazards.eta_y[1], t),
                ];
                let et = [
                    evaluation.at(&hazards.eta_t[0], t),
                    evaluation.at(&hazards.eta_t[1], t),
                ];
                cache = Some((t, ey, et));
                (ey, et)
            }
        };
        let arm = ds.records()[i].arm;
        let case = if is_event {
            FrailtyCase::Event
        } else {
            FrailtyCase::EventFree
        };
        let p = ps_probability(case, eta_t[arm.index()], eta_y[arm.other().index()], frailty)?;
        Ok((p, case.number()))
    })
}

/// Estimates marginals on `ds`, transforms them and assigns each at-risk
/// subject its gamma-frailty principal stratum probability.
pub fn build_ps_weights(ds: &Dataset, frailty: FrailtyGamma) -> Result<PsWeightTable> {
    build_ps_weights_with(ds, frailty, CurveEvaluation::default())
}

pub fn build_ps_weights_with(
    ds: &Dataset,
    frailty: FrailtyGamma,
    evaluation: CurveEvaluation,
) -> Result<PsWeightTable> {
    let hazards = ConditionalHazards::estimate(ds, frailty)?;
    ps_weights_from_hazards(ds, &hazards, frailty, evaluation)
}
