//! Archimedean copulas for the joint law of the first event and death.
//!
//! Bivariate Clayton, Gumbel and Frank copulas with analytic partial
//! derivatives and densities, Kendall's tau maps, the censored
//! pseudo-likelihood and its maximizer, the nested trivariate Clayton copula
//! linking `(E^z, Y^z, Y^{1-z})`, copula-based principal stratum
//! probabilities and an empirical fit assessment.
//!
//! Copulas here are survival copulas: `C(u1, u2)` is the joint survival
//! probability when `u1`, `u2` are the marginal survival probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{km_survival, StepFunction};
use crate::frailty_ps::PsWeightTable;
use crate::numeric::{brent_maximize, integrate, invert_monotone, sample_sd};
use crate::ppsh::bootstrap_statistic;
use crate::survdata::{Arm, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CopulaKind {
    Clayton,
    Gumbel,
    Frank,
}

impl CopulaKind {
    pub const ALL: [CopulaKind; 3] = [CopulaKind::Clayton, CopulaKind::Gumbel, CopulaKind::Frank];

    /// Parameter value at which the copula is the independence copula.
    pub fn independence(self) -> f64 {
        match self {
            CopulaKind::Gumbel => 1.0,
            CopulaKind::Clayton | CopulaKind::Frank => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CopulaKind::Clayton => "clayton",
            CopulaKind::Gumbel => "gumbel",
            CopulaKind::Frank => "frank",
        }
    }
}

impl std::str::FromStr for CopulaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clayton" => Ok(CopulaKind::Clayton),
            "gumbel" => Ok(CopulaKind::Gumbel),
            "frank" => Ok(CopulaKind::Frank),
            other => Err(Error::InvalidParameter(format!("unknown copula family {other:?}"))),
        }
    }
}

/// A bivariate copula with its dependence parameter.
///
/// Admissible ranges: Clayton `varsigma >= 0`, Gumbel `varsigma >= 1`,
/// Frank any finite value. The boundary values 0, 1 and 0 are the
/// independence copula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CopulaFamily {
    pub kind: CopulaKind,
    pub varsigma: f64,
}

/// Copula value with its first partials and density at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CopulaValue {
    pub value: f64,
    pub d_u1: f64,
    pub d_u2: f64,
    pub density: f64,
}

fn check_unit(u: f64, name: &str) -> Result<()> {
    if u > 0.0 && u <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} = {u} outside (0, 1]")))
    }
}

/// `ln(e^a + e^b - 1)` for `a, b >= 0` without overflow or cancellation.
fn log_sum_minus_one(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi < 1.0 {
        (a.exp_m1() + b.exp_m1()).ln_1p()
    } else {
        hi + ((lo - hi).exp() - (-hi).exp()).ln_1p()
    }
}

fn independence_value(u1: f64, u2: f64) -> CopulaValue {
    CopulaValue {
        value: u1 * u2,
        d_u1: u2,
        d_u2: u1,
        density: 1.0,
    }
}

impl CopulaFamily {
    pub fn new(kind: CopulaKind, varsigma: f64) -> Result<Self> {
        let ok = varsigma.is_finite()
            && match kind {
                CopulaKind::Clayton => varsigma >= 0.0,
                CopulaKind::Gumbel => varsigma >= 1.0,
                CopulaKind::Frank => true,
            };
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "{} parameter {varsigma} outside its admissible range",
                kind.name()
            )));
        }
        Ok(CopulaFamily { kind, varsigma })
    }

    pub fn independence(kind: CopulaKind) -> Self {
        CopulaFamily {
            kind,
            varsigma: kind.independence(),
        }
    }

    pub fn is_independence(&self) -> bool {
        self.varsigma == self.kind.independence()
    }

    pub fn value(&self, u1: f64, u2: f64) -> Result<f64> {
        Ok(self.eval(u1, u2)?.value)
    }

    /// `C`, `dC/du1`, `dC/du2` and `d2C/du1du2` at `(u1, u2)`.
    pub fn eval(&self, u1: f64, u2: f64) -> Result<CopulaValue> {
        check_unit(u1, "u1")?;
        check_unit(u2, "u2")?;
        if self.is_independence() {
            return Ok(independence_value(u1, u2));
        }
        let s = self.varsigma;
        Ok(match self.kind {
            CopulaKind::Clayton => {
                let (l1, l2) = (u1.ln(), u2.ln());
                let log_a = log_sum_minus_one(-s * l1, -s * l2);
                CopulaValue {
                    value: (-log_a / s).exp(),
                    d_u1: ((-s - 1.0) * l1 + (-1.0 / s - 1.0) * log_a).exp(),
                    d_u2: ((-s - 1.0) * l2 + (-1.0 / s - 1.0) * log_a).exp(),
                    density: (1.0 + s)
                        * ((-s - 1.0) * (l1 + l2) + (-1.0 / s - 2.0) * log_a).exp(),
                }
            }
            CopulaKind::Gumbel => {
                let (x, y) = (-u1.ln(), -u2.ln());
                let w = x.powf(s) + y.powf(s);
                let w_root = w.powf(1.0 / s);
                let value = (-w_root).exp();
                let common = value * w.powf(1.0 / s - 1.0);
                CopulaValue {
                    value,
                    d_u1: common * x.powf(s - 1.0) / u1,
                    d_u2: common * y.powf(s - 1.0) / u2,
                    density: value * (x * y).powf(s - 1.0) / (u1 * u2)
                        * w.powf(1.0 / s - 2.0)
                        * (w_root + s - 1.0),
                }
            }
            CopulaKind::Frank => {
                let a = (-s).exp_m1();
                let p = (-s * u1).exp_m1();
                let q = (-s * u2).exp_m1();
                // -(a + p q), summed from two same-signed terms
                let d = -(-s * u1).exp() * q + (-s).exp() * (s * (1.0 - u2)).exp_m1();
                let ratio = p * q / a;
                let log_ratio = if ratio > -0.5 {
                    ratio.ln_1p()
                } else {
                    (d / -a).ln()
                };
                CopulaValue {
                    value: -log_ratio / s,
                    d_u1: -(-s * u1).exp() * q / d,
                    d_u2: -(-s * u2).exp() * p / d,
                    density: -s * a * (-s * (u1 + u2)).exp() / (d * d),
                }
            }
        })
    }

    /// Kendall's tau implied by the parameter.
    pub fn kendall_tau(&self) -> f64 {
        let s = self.varsigma;
        match self.kind {
            CopulaKind::Clayton => s / (2.0 + s),
            CopulaKind::Gumbel => 1.0 - 1.0 / s,
            CopulaKind::Frank => frank_tau(s),
        }
    }

    /// Parameter with Kendall's tau equal to `tau`.
    pub fn from_kendall_tau(kind: CopulaKind, tau: f64) -> Result<Self> {
        let range_err = || {
            Err(Error::InvalidParameter(format!(
                "Kendall's tau {tau} not attainable by the {} copula",
                kind.name()
            )))
        };
        let s = match kind {
            CopulaKind::Clayton if (0.0..1.0).contains(&tau) => 2.0 * tau / (1.0 - tau),
            CopulaKind::Gumbel if (0.0..1.0).contains(&tau) => 1.0 / (1.0 - tau),
            CopulaKind::Frank if tau > -1.0 && tau < 1.0 => {
                let s = invert_monotone(frank_tau, tau.abs(), 1e-15, 400);
                if !s.is_finite() {
                    return range_err();
                }
                s.copysign(tau)
            }
            _ => return range_err(),
        };
        CopulaFamily::new(kind, s)
    }
}

/// Frank tau `1 + 4 (D1(s) - 1) / s` with `D1` the first Debye function.
fn frank_tau(s: f64) -> f64 {
    let a = s.abs();
    if a == 0.0 {
        return 0.0;
    }
    let tau = if a < 1e-2 {
        a / 9.0 - a.powi(3) / 900.0 + a.powi(5) / 52_920.0
    } else {
        // D1(a) - 1 = (1/a) * integral of (t / (e^t - 1) - 1) over [0, a]
        let h = |t: f64| {
            if t == 0.0 {
                0.0
            } else {
                let m = t.exp_m1();
                (t - m) / m
            }
        };
        let excess = integrate(h, 0.0, a, 1e-14 * a * a);
        1.0 + 4.0 * excess / (a * a)
    };
    tau.copysign(s)
}

/// Nested Clayton copula `C(u1, C(u2, u3; varsigma1); varsigma0)` with
/// `0 <= varsigma0 <= varsigma1`. `varsigma0 = 0` makes `u1` independent of
/// `(u2, u3)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NestedClayton {
    pub varsigma0: f64,
    pub varsigma1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NestedValue {
    pub value: f64,
    pub d_u1: f64,
    pub d_u2: f64,
    pub d_u1u2: f64,
}

impl NestedClayton {
    pub fn new(varsigma0: f64, varsigma1: f64) -> Result<Self> {
        if !(varsigma0.is_finite() && varsigma1.is_finite()) || varsigma0 < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "nested Clayton parameters ({varsigma0}, {varsigma1}) must be finite and >= 0"
            )));
        }
        if varsigma0 > varsigma1 {
            return Err(Error::InvalidParameter(format!(
                "nested Clayton requires varsigma0 <= varsigma1, got {varsigma0} > {varsigma1}"
            )));
        }
        Ok(NestedClayton {
            varsigma0,
            varsigma1,
        })
    }

    /// Bivariate margin of `(u1, u2)`.
    pub fn outer(&self) -> CopulaFamily {
        CopulaFamily {
            kind: CopulaKind::Clayton,
            varsigma: self.varsigma0,
        }
    }

    pub fn eval(&self, u1: f64, u2: f64, u3: f64) -> Result<NestedValue> {
        check_unit(u1, "u1")?;
        check_unit(u2, "u2")?;
        check_unit(u3, "u3")?;
        let (s0, s1) = (self.varsigma0, self.varsigma1);
        if s0 == 0.0 {
            let inner = CopulaFamily {
                kind: CopulaKind::Clayton,
                varsigma: s1,
            }
            .eval(u2, u3)?;
            return Ok(NestedValue {
                value: u1 * inner.value,
                d_u1: inner.value,
                d_u2: u1 * inner.d_u1,
                d_u1u2: inner.d_u1,
            });
        }
        let (l1, l2, l3) = (u1.ln(), u2.ln(), u3.ln());
        let log_w = log_sum_minus_one(-s1 * l2, -s1 * l3);
        let log_a = log_sum_minus_one(-s0 * l1, s0 / s1 * log_w);
        // shared factor w^{s0/s1 - 1} u2^{-s1 - 1}
        let inner = (s0 / s1 - 1.0) * log_w + (-s1 - 1.0) * l2;
        let outer1 = (-s0 - 1.0) * l1;
        Ok(NestedValue {
            value: (-log_a / s0).exp(),
            d_u1: ((-1.0 / s0 - 1.0) * log_a + outer1).exp(),
            d_u2: ((-1.0 / s0 - 1.0) * log_a + inner).exp(),
            d_u1u2: (1.0 + s0) * ((-1.0 / s0 - 2.0) * log_a + outer1 + inner).exp(),
        })
    }
}

/// Observed `(E, Y)` pair with status indicators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedTimes {
    pub e: f64,
    pub delta1: bool,
    pub y: f64,
    pub delta2: bool,
}

/// Marginal survival values and status indicators of one subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PseudoObservation {
    pub u1: f64,
    pub u2: f64,
    pub delta1: bool,
    pub delta2: bool,
}

/// Where pseudo-observation marginals are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginalScope {
    #[default]
    Pooled,
    PerArm,
}

/// `(E, Y)` pairs: `E` is the first of event and death, `Y` the death or
/// last follow-up time.
pub fn paired_times(ds: &Dataset) -> Vec<PairedTimes> {
    ds.records()
        .iter()
        .map(|r| {
            let (e, delta1) = r.first_event();
            PairedTimes {
                e,
                delta1,
                y: r.followup_time,
                delta2: r.died(),
            }
        })
        .collect()
}

/// Survival curve value at `t` by the midpoint of its left limit and value,
/// clamped to `[1 / (2n), 1]`.
pub fn clamped_survival(curve: &StepFunction, t: f64, n: usize) -> f64 {
    let eps = 0.5 / n as f64;
    curve.midpoint(t).clamp(eps, 1.0)
}

/// Kaplan-Meier pseudo-observations for a set of pairs.
pub fn pseudo_observations(pairs: &[PairedTimes]) -> Result<Vec<PseudoObservation>> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(p) = pairs.iter().find(|p| !p.delta1 && p.delta2) {
        return Err(Error::InvalidData(format!(
            "death observed at {} without an observed first event",
            p.y
        )));
    }
    let s_e = km_survival(&pairs.iter().map(|p| (p.e, p.delta1)).collect::<Vec<_>>())?;
    let s_y = km_survival(&pairs.iter().map(|p| (p.y, p.delta2)).collect::<Vec<_>>())?;
    let n = pairs.len();
    Ok(pairs
        .iter()
        .map(|p| PseudoObservation {
            u1: clamped_survival(&s_e, p.e, n),
            u2: clamped_survival(&s_y, p.y, n),
            delta1: p.delta1,
            delta2: p.delta2,
        })
        .collect())
}

/// Pseudo-observations of a dataset with pooled or per-arm marginals.
pub fn dataset_pseudo_observations(
    ds: &Dataset,
    scope: MarginalScope,
) -> Result<Vec<PseudoObservation>> {
    let pairs = paired_times(ds);
    match scope {
        MarginalScope::Pooled => pseudo_observations(&pairs),
        MarginalScope::PerArm => {
            let mut out = vec![None; pairs.len()];
            for arm in Arm::BOTH {
                let idx: Vec<usize> = (0..ds.len())
                    .filter(|&i| ds.records()[i].arm == arm)
                    .collect();
                if idx.is_empty() {
                    return Err(Error::EmptyArm(arm.indicator()));
                }
                let sub: Vec<PairedTimes> = idx.iter().map(|&i| pairs[i]).collect();
                for (k, obs) in pseudo_observations(&sub)?.into_iter().enumerate() {
                    out[idx[k]] = Some(obs);
                }
            }
            Ok(out.into_iter().map(|o| o.expect("every subject in one arm")).collect())
        }
    }
}

/// Log pseudo-likelihood: each subject contributes the density (both
/// observed), `dC/du1` (first event observed, death censored), `dC/du2`
/// (death observed, first event censored) or `C` (both censored).
pub fn pseudo_log_likelihood(fam: &CopulaFamily, obs: &[PseudoObservation]) -> Result<f64> {
    let mut total = 0.0;
    for o in obs {
        let v = fam.eval(o.u1, o.u2)?;
        let factor = match (o.delta1, o.delta2) {
            (true, true) => v.density,
            (true, false) => v.d_u1,
            (false, true) => v.d_u2,
            (false, false) => v.value,
        };
        if !(factor.is_finite() && factor > 0.0) {
            return Ok(f64::NEG_INFINITY);
        }
        total += factor.ln();
    }
    Ok(total)
}

/// Maximum pseudo-likelihood estimate of the copula parameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MpleFit {
    pub family: CopulaKind,
    pub varsigma: f64,
    pub kendall_tau: f64,
    pub log_pl: f64,
    /// The maximizer sits on the edge of the search range.
    pub at_boundary: bool,
    pub se: Option<f64>,
    pub bootstrap_used: usize,
}

const SEARCH_GRID: usize = 61;

/// Search range in the optimization scale and the map back to the parameter.
fn search_space(kind: CopulaKind) -> ((f64, f64), fn(f64) -> f64) {
    match kind {
        CopulaKind::Clayton => ((-12.0_f64, 100.0_f64.ln()), |x: f64| x.exp()),
        CopulaKind::Gumbel => ((-12.0_f64, 100.0_f64.ln()), |x: f64| 1.0 + x.exp()),
        CopulaKind::Frank => ((-100.0, 100.0), |x: f64| x),
    }
}

/// Maximizes the pseudo-likelihood over the family's admissible range: a
/// coarse grid in the optimization scale followed by Brent's method.
pub fn fit_mple_observations(obs: &[PseudoObservation], kind: CopulaKind) -> Result<MpleFit> {
    if obs.len() < 2 {
        return Err(Error::InvalidData("MPLE needs at least 2 subjects".into()));
    }
    let ((lo, hi), to_param) = search_space(kind);
    let objective = |x: f64| {
        CopulaFamily::new(kind, to_param(x))
            .and_then(|f| pseudo_log_likelihood(&f, obs))
            .unwrap_or(f64::NEG_INFINITY)
    };
    let grid: Vec<f64> = (0..SEARCH_GRID)
        .map(|k| lo + (hi - lo) * k as f64 / (SEARCH_GRID - 1) as f64)
        .collect();
    let values: Vec<f64> = grid.iter().map(|&x| objective(x)).collect();
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::FlatLikelihood(format!(
            "{} pseudo-likelihood is not finite anywhere on the search range",
            kind.name()
        )));
    }
    let spread = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - finite.iter().cloned().fold(f64::INFINITY, f64::min);
    if spread < 1e-12 {
        return Err(Error::FlatLikelihood(format!(
            "{} pseudo-likelihood does not depend on the parameter; the data carry no \
             information about dependence",
            kind.name()
        )));
    }
    let best = (0..SEARCH_GRID)
        .max_by(|&a, &b| values[a].total_cmp(&values[b]))
        .expect("non-empty grid");
    let a = grid[best.saturating_sub(1)];
    let b = grid[(best + 1).min(SEARCH_GRID - 1)];
    let (mut x, mut fx) = brent_maximize(objective, a, b, 1e-8);
    if values[best] > fx {
        x = grid[best];
        fx = values[best];
    }
    let edge = 1e-6 * (hi - lo);
    let varsigma = to_param(x);
    let fam = CopulaFamily::new(kind, varsigma)?;
    Ok(MpleFit {
        family: kind,
        varsigma,
        kendall_tau: fam.kendall_tau(),
        log_pl: fx,
        at_boundary: x - lo <= edge || hi - x <= edge,
        se: None,
        bootstrap_used: 0,
    })
}

/// MPLE from raw `(E, Y)` pairs.
pub fn fit_mple_pairs(pairs: &[PairedTimes], kind: CopulaKind) -> Result<MpleFit> {
    fit_mple_observations(&pseudo_observations(pairs)?, kind)
}

/// MPLE of the `(E, Y)` copula of a dataset.
pub fn fit_mple(ds: &Dataset, kind: CopulaKind, scope: MarginalScope) -> Result<MpleFit> {
    fit_mple_observations(&dataset_pseudo_observations(ds, scope)?, kind)
}

/// MPLE with a nonparametric bootstrap standard error from `b` resamples.
pub fn fit_mple_with_se(
    ds: &Dataset,
    kind: CopulaKind,
    scope: MarginalScope,
    b: usize,
    seed: u64,
) -> Result<MpleFit> {
    let mut fit = fit_mple(ds, kind, scope)?;
    if b > 0 {
        let draws: Vec<f64> = bootstrap_statistic(ds, b, seed, |d| {
            fit_mple(d, kind, scope).ok().map(|f| f.varsigma)
        })
        .into_iter()
        .flatten()
        .collect();
        if draws.len() < b.div_ceil(2) {
            return Err(Error::TooFewReplicates {
                converged: draws.len(),
                requested: b,
            });
        }
        fit.se = Some(sample_sd(&draws));
        fit.bootstrap_used = draws.len();
    }
    Ok(fit)
}

/// Per-arm Kaplan-Meier curves for the first event and for death.
fn arm_marginals(ds: &Dataset) -> Result<([StepFunction; 2], [StepFunction; 2], [usize; 2])> {
    let pairs = paired_times(ds);
    let curve = |arm: Arm, first: bool| -> Result<StepFunction> {
        let data: Vec<(f64, bool)> = ds
            .records()
            .iter()
            .zip(&pairs)
            .filter(|(r, _)| r.arm == arm)
            .map(|(_, p)| if first { (p.e, p.delta1) } else { (p.y, p.delta2) })
            .collect();
        if data.is_empty() {
            return Err(Error::EmptyArm(arm.indicator()));
        }
        km_survival(&data)
    };
    Ok((
        [curve(Arm::Control, true)?, curve(Arm::Treated, true)?],
        [curve(Arm::Control, false)?, curve(Arm::Treated, false)?],
        [ds.arm_size(Arm::Control), ds.arm_size(Arm::Treated)],
    ))
}

fn checked_ratio(num: f64, den: f64) -> Result<f64> {
    let p = num / den;
    if !p.is_finite() {
        return Err(Error::InvalidData(format!(
            "principal stratum probability {num} / {den} is not finite"
        )));
    }
    if (-1e-9..=1.0 + 1e-9).contains(&p) {
        Ok(p.clamp(0.0, 1.0))
    } else {
        Err(Error::InvalidData(format!("principal stratum probability {p} outside [0, 1]")))
    }
}

/// Copula principal stratum probabilities. For a subject of arm `z` at risk
/// at `t_j` with last follow-up `d_i`, `u1 = S_E^z(t_j)`, `u2 = S_Y^z(d_i)`
/// and `u3 = S_Y^{1-z}(t_j)`; the probability is the ratio of the nested
/// copula to its bivariate margin after differentiating in `u1` when the
/// event is at `t_j` and in `u2` when the subject died:
///
/// | case | death | event at `t_j` | derivative |
/// |------|-------|----------------|------------|
/// | 1    | yes   | yes            | `d2/du1du2` |
/// | 2    | yes   | no             | `d/du2`     |
/// | 3    | no    | yes            | `d/du1`     |
/// | 4    | no    | no             | none        |
pub fn copula_ps_weights(ds: &Dataset, nc: &NestedClayton) -> Result<PsWeightTable> {
    ds.require_both_arms()?;
    let (s_e, s_y, sizes) = arm_marginals(ds)?;
    let outer = nc.outer();
    PsWeightTable::build(ds, |t, i, is_event| {
        let rec = &ds.records()[i];
        let (z, cf) = (rec.arm.index(), rec.arm.other().index());
        let u1 = clamped_survival(&s_e[z], t, sizes[z]);
        let u2 = clamped_survival(&s_y[z], rec.followup_time, sizes[z]);
        let u3 = clamped_survival(&s_y[cf], t, sizes[cf]);
        let tri = nc.eval(u1, u2, u3)?;
        let bi = outer.eval(u1, u2)?;
        let (num, den, case) = match (rec.died(), is_event) {
            (true, true) => (tri.d_u1u2, bi.density, 1),
            (true, false) => (tri.d_u2, bi.d_u2, 2),
            (false, true) => (tri.d_u1, bi.d_u1, 3),
            (false, false) => (tri.value, bi.value, 4),
        };
        Ok((checked_ratio(num, den)?, case))
    })
}

/// One subject of the fit-assessment table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitAssessmentRow {
    pub subject_id: String,
    pub e: f64,
    pub y: f64,
    pub empirical_e: f64,
    pub empirical_y: f64,
    pub empirical_joint: f64,
    pub copula_joint: f64,
}

/// Empirical versus copula-implied joint survival `P(E > e_i, Y > y_i)` over
/// subjects with both an observed event and an observed death. Empirical
/// quantities average indicators over all subjects; the copula is evaluated
/// at the empirical marginals clamped to `[1 / (2n), 1]`.
pub fn fit_assessment(ds: &Dataset, fam: &CopulaFamily) -> Result<Vec<FitAssessmentRow>> {
    let pairs = paired_times(ds);
    let n = pairs.len();
    let nf = n as f64;
    let eps = 0.5 / nf;
    let mut rows = Vec::new();
    for (rec, p) in ds.records().iter().zip(&pairs) {
        if !(rec.had_event() && rec.died()) {
            continue;
        }
        let (e, y) = (p.e, p.y);
        let count = |pred: &dyn Fn(&PairedTimes) -> bool| {
            pairs.iter().filter(|q| pred(q)).count() as f64 / nf
        };
        let empirical_e = count(&|q| q.e > e);
        let empirical_y = count(&|q| q.y > y);
        let empirical_joint = count(&|q| q.e > e && q.y > y);
        let copula_joint = fam.value(empirical_e.clamp(eps, 1.0), empirical_y.clamp(eps, 1.0))?;
        rows.push(FitAssessmentRow {
            subject_id: rec.id.clone(),
            e,
            y,
            empirical_e,
            empirical_y,
            empirical_joint,
            copula_joint,
        });
    }
    if rows.is_empty() {
        return Err(Error::InvalidData(
            "no subject has both an observed event and an observed death".into(),
        ));
    }
    Ok(rows)
}

pub fn write_fit_assessment<W: std::io::Write>(rows: &[FitAssessmentRow], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush().map_err(|source| Error::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fam(kind: CopulaKind, s: f64) -> CopulaFamily {
        CopulaFamily::new(kind, s).unwrap()
    }

    #[test]
    fn clayton_value() {
        let c = fam(CopulaKind::Clayton, 2.0).value(0.5, 0.5).unwrap();
        assert!((c - 7f64.powf(-0.5)).abs() < 1e-14);
    }

    #[test]
    fn uniform_margins() {
        for (kind, s) in [
            (CopulaKind::Clayton, 3.0),
            (CopulaKind::Gumbel, 2.5),
            (CopulaKind::Frank, -4.0),
            (CopulaKind::Frank, 7.0),
        ] {
            let f = fam(kind, s);
            for u in [0.01, 0.3, 0.9] {
                assert!((f.value(u, 1.0).unwrap() - u).abs() < 1e-12, "{kind:?}");
                assert!((f.value(1.0, u).unwrap() - u).abs() < 1e-12, "{kind:?}");
            }
        }
    }

    #[test]
    fn tau_examples() {
        assert!((fam(CopulaKind::Clayton, 2.0).kendall_tau() - 0.5).abs() < 1e-15);
        assert!((fam(CopulaKind::Gumbel, 2.0).kendall_tau() - 0.5).abs() < 1e-15);
        assert!((fam(CopulaKind::Clayton, 1.11).kendall_tau() - 0.36).abs() < 0.005);
        assert!(fam(CopulaKind::Frank, 1e-6).kendall_tau().abs() < 1e-6);
        // continuity across the series switch
        let lo = fam(CopulaKind::Frank, 0.01 - 1e-12).kendall_tau();
        let hi = fam(CopulaKind::Frank, 0.01 + 1e-12).kendall_tau();
        assert!((hi - lo - 2e-12 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn nested_reduces_to_bivariate() {
        let nc = NestedClayton::new(1.5, 4.0).unwrap();
        let c = fam(CopulaKind::Clayton, 1.5);
        let v = nc.eval(0.3, 0.6, 1.0).unwrap();
        assert!((v.value - c.value(0.3, 0.6).unwrap()).abs() < 1e-14);
        assert!(NestedClayton::new(3.0, 2.0).is_err());
    }

    #[test]
    fn impossible_status_pattern_rejected() {
        let pairs = [PairedTimes {
            e: 1.0,
            delta1: false,
            y: 1.0,
            delta2: true,
        }];
        assert!(pseudo_observations(&pairs).is_err());
    }
}
