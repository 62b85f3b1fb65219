//! Trial simulator with a known marginal principal stratum hazard ratio, and
//! the Monte Carlo replication harness built on it.
//!
//! Each subject draws a frailty `theta`, exponential death times with rate
//! `theta * lambda_z`, exponential loss to follow-up with rate `lambda_c`,
//! and a first non-fatal event time solving `theta * eta_T^z(t) = -log U`.
//! Control uses `eta_T^0(t) = phi t`; the treated-arm hazard `eta_T^1` is
//! the closed-form solution making the marginal principal stratum hazard
//! ratio exactly `r_ps` under gamma frailty.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frailty_ps::{
    estimate_marginals, ps_weights_from_hazards, ConditionalHazards, CurveEvaluation,
    FrailtyGamma, PsWeightTable,
};
use crate::numeric::{invert_monotone, mean, sample_sd};
use crate::ppsh::{fit_cause_specific, fit_ppsh};
use crate::schoenfeld::{prop_test, TimeTransform};
use crate::survdata::{Arm, Dataset, SubjectRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrailtyFamily {
    #[default]
    Gamma,
    #[serde(alias = "ig")]
    InverseGaussian,
}

/// Generator parameters. Defaults are the common settings of the
/// simulation study with `lambda0 = 0.25`, `gamma = 0.5`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda_c: f64,
    pub tau: f64,
    pub phi: f64,
    pub r_ps: f64,
    pub gamma: f64,
    pub frailty_family: FrailtyFamily,
    pub n: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            lambda0: 0.25,
            lambda1: 0.2,
            lambda_c: 0.03,
            tau: 2.0,
            phi: 2.0,
            r_ps: 0.5,
            gamma: 0.5,
            frailty_family: FrailtyFamily::Gamma,
            n: 300,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        for (name, v) in [
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("lambda_c", self.lambda_c),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [
            ("tau", self.tau),
            ("phi", self.phi),
            ("r_ps", self.r_ps),
            ("gamma", self.gamma),
        ] {
            if !(v > 0.0) || v.is_nan() {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if !self.phi.is_finite() || !self.r_ps.is_finite() || !self.gamma.is_finite() {
            return bad("phi, r_ps and gamma must be finite".into());
        }
        if self.n < 2 || self.n % 2 != 0 {
            return bad(format!("n must be even and >= 2, got {}", self.n));
        }
        if self.r_ps != 1.0 {
            let denom = self.lambda_y() - self.phi * (self.r_ps - 1.0);
            if denom.abs() <= 1e-12 * (self.lambda_y() + self.phi * self.r_ps) {
                return bad(format!(
                    "r_ps = 1 + (lambda0 + lambda1) / phi = {} makes the treated-arm \
                     hazard singular (lambda0 + lambda1 - phi (r_ps - 1) = 0)",
                    self.r_ps
                ));
            }
        }
        Ok(())
    }

    pub fn lambda_y(&self) -> f64 {
        self.lambda0 + self.lambda1
    }

    /// Same configuration without mortality.
    pub fn hypothetical(&self) -> SimConfig {
        SimConfig {
            lambda0: 0.0,
            lambda1: 0.0,
            ..self.clone()
        }
    }

    fn death_rate(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Control => self.lambda0,
            Arm::Treated => self.lambda1,
        }
    }
}

/// Frailty draw with mean 1 and variance `1 / gamma`.
pub fn sample_frailty<R: Rng + ?Sized>(family: FrailtyFamily, gamma: f64, rng: &mut R) -> f64 {
    match family {
        FrailtyFamily::Gamma => Gamma::new(gamma, 1.0 / gamma)
            .expect("gamma > 0")
            .sample(rng),
        FrailtyFamily::InverseGaussian => sample_inverse_gaussian(1.0, gamma, rng),
    }
}

/// Inverse Gaussian with mean `mu` and shape `shape` by the transformation
/// method with one uniform acceptance step.
pub fn sample_inverse_gaussian<R: Rng + ?Sized>(mu: f64, shape: f64, rng: &mut R) -> f64 {
    let nu: f64 = StandardNormal.sample(rng);
    let y = nu * nu;
    let x = mu + mu * mu * y / (2.0 * shape)
        - mu / (2.0 * shape) * (4.0 * mu * shape * y + mu * mu * y * y).sqrt();
    let u: f64 = rng.random();
    if u <= mu / (mu + x) {
        x
    } else {
        mu * mu / x
    }
}

/// Treated-arm conditional cumulative event hazard at `theta = 1`.
pub fn eta1_t(t: f64, cfg: &SimConfig) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::InvalidParameter(format!("time {t} must be >= 0")));
    }
    let (phi, r, g, ly) = (cfg.phi, cfg.r_ps, cfg.gamma, cfg.lambda_y());
    if r == 1.0 {
        return Ok(phi * t);
    }
    let denom = ly - phi * (r - 1.0);
    if denom.abs() <= 1e-12 * (ly + phi * r) {
        return Err(Error::InvalidParameter(
            "lambda0 + lambda1 - phi (r_ps - 1) must be nonzero".into(),
        ));
    }
    let a = r * phi / (phi + ly);
    // (1 - r) g [(1 + (phi + ly) t / g)^a - 1] + ly r t
    let growth = (a * ((phi + ly) * t / g).ln_1p()).exp_m1();
    Ok(phi / denom * ((1.0 - r) * g * growth + ly * r * t))
}

/// Conditional cumulative event hazard of an arm.
pub fn eta_t(arm: Arm, t: f64, cfg: &SimConfig) -> Result<f64> {
    match arm {
        Arm::Control => Ok(cfg.phi * t),
        Arm::Treated => eta1_t(t, cfg),
    }
}

/// Time at which `eta_T^arm` reaches `target`.
pub fn invert_eta(arm: Arm, target: f64, cfg: &SimConfig) -> Result<f64> {
    if !(target >= 0.0) {
        return Err(Error::InvalidParameter(format!("target {target} must be >= 0")));
    }
    match arm {
        Arm::Control => Ok(target / cfg.phi),
        Arm::Treated => {
            cfg.validate()?;
            let f = |t: f64| eta1_t(t, cfg).expect("validated config");
            Ok(invert_monotone(f, target, 1e-10, 200))
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for `(seed, replicate, domain, subject)`.
fn subject_rng(seed: u64, replicate: u64, domain: u64, subject: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(seed) ^ splitmix64(replicate.wrapping_mul(4).wrapping_add(domain)));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(subject);
    rng
}

const DOMAIN_TRIAL: u64 = 0;
const DOMAIN_HYPOTHETICAL: u64 = 1;

fn simulate_stream(cfg: &SimConfig, replicate: u64, domain: u64) -> Result<Dataset> {
    cfg.validate()?;
    let half = cfg.n / 2;
    let mut records = Vec::with_capacity(cfg.n);
    for k in 0..cfg.n {
        let arm = if k < half { Arm::Control } else { Arm::Treated };
        let mut rng = subject_rng(cfg.seed, replicate, domain, k as u64);
        let theta = sample_frailty(cfg.frailty_family, cfg.gamma, &mut rng);
        let e_death: f64 = Exp1.sample(&mut rng);
        let e_censor: f64 = Exp1.sample(&mut rng);
        let e_event: f64 = Exp1.sample(&mut rng);

        let death_rate = theta * cfg.death_rate(arm);
        let y = if death_rate > 0.0 { e_death / death_rate } else { f64::INFINITY };
        let c = if cfg.lambda_c > 0.0 { e_censor / cfg.lambda_c } else { f64::INFINITY };
        let d = y.min(c).min(cfg.tau);
        let died = y <= c.min(cfg.tau);

        let target = e_event / theta;
        let event_time = if eta_t(arm, d, cfg)? >= target {
            Some(invert_eta(arm, target, cfg)?.min(d))
        } else {
            None
        };
        records.push(SubjectRecord::new(format!("s{k}"), arm, d, event_time, died));
    }
    Dataset::new(records)
}

/// One simulated trial from `cfg.seed`.
pub fn simulate_trial(cfg: &SimConfig) -> Result<Dataset> {
    simulate_stream(cfg, 0, DOMAIN_TRIAL)
}

/// Trial `replicate` of a Monte Carlo study.
pub fn simulate_replicate(cfg: &SimConfig, replicate: u64) -> Result<Dataset> {
    simulate_stream(cfg, replicate, DOMAIN_TRIAL)
}

/// Companion trial without mortality, drawn from its own streams.
pub fn simulate_hypothetical(cfg: &SimConfig, replicate: u64) -> Result<Dataset> {
    simulate_stream(&cfg.hypothetical(), replicate, DOMAIN_HYPOTHETICAL)
}

/// Estimation methods compared in a replication study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Method {
    /// Cox model for the event on the mortality-free companion trial.
    HypotheticalCox,
    /// Cox model for the event with death as censoring.
    CauseSpecificCox,
    /// PPSH with the given working frailty `gamma`.
    Ppsh { gamma: f64 },
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::HypotheticalCox => "hypothetical".into(),
            Method::CauseSpecificCox => "cause-specific".into(),
            Method::Ppsh { .. } => "ppsh".into(),
        }
    }

    pub fn working_gamma(&self) -> Option<f64> {
        match self {
            Method::Ppsh { gamma } => Some(*gamma),
            _ => None,
        }
    }

    /// Hypothetical, cause-specific and PPSH at each working gamma.
    pub fn standard_set(gammas: &[f64]) -> Vec<Method> {
        let mut m = vec![Method::HypotheticalCox, Method::CauseSpecificCox];
        m.extend(gammas.iter().map(|&gamma| Method::Ppsh { gamma }));
        m
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ArmSummary {
    pub dead_pct: f64,
    /// Administratively censored at `tau`.
    pub censored_pct: f64,
    pub lost_pct: f64,
    pub mean_followup: f64,
    pub event_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub working_gamma: Option<f64>,
    pub converged: usize,
    pub failed: usize,
    pub mean_estimate: f64,
    pub sd: f64,
    /// Monte Carlo standard error of the mean estimate.
    pub mc_se: f64,
    pub bias: f64,
    pub hazard_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationReport {
    pub config: SimConfig,
    pub replicates: usize,
    /// Value the biases are measured against.
    pub reference: f64,
    /// `"log-r"` or `"hypothetical-mean"`.
    pub reference_kind: String,
    pub placebo: ArmSummary,
    pub treatment: ArmSummary,
    pub methods: Vec<MethodSummary>,
}

fn arm_summary(ds: &Dataset, arm: Arm, tau: f64) -> ArmSummary {
    let recs: Vec<_> = ds.records().iter().filter(|r| r.arm == arm).collect();
    let n = recs.len() as f64;
    let pct = |pred: &dyn Fn(&SubjectRecord) -> bool| {
        100.0 * recs.iter().filter(|r| pred(r)).count() as f64 / n
    };
    ArmSummary {
        dead_pct: pct(&|r| r.died()),
        censored_pct: pct(&|r| !r.died() && r.followup_time >= tau),
        lost_pct: pct(&|r| !r.died() && r.followup_time < tau),
        mean_followup: recs.iter().map(|r| r.followup_time).sum::<f64>() / n,
        event_pct: pct(&|r| r.had_event()),
    }
}

fn average_summaries(items: &[ArmSummary]) -> ArmSummary {
    let k = items.len() as f64;
    let avg = |f: &dyn Fn(&ArmSummary) -> f64| items.iter().map(f).sum::<f64>() / k;
    ArmSummary {
        dead_pct: avg(&|s| s.dead_pct),
        censored_pct: avg(&|s| s.censored_pct),
        lost_pct: avg(&|s| s.lost_pct),
        mean_followup: avg(&|s| s.mean_followup),
        event_pct: avg(&|s| s.event_pct),
    }
}

/// Estimates on one replicate, one entry per method (`None` on failure or
/// non-convergence).
#[derive(Debug, Clone)]
pub struct ReplicateOutcome {
    pub placebo: ArmSummary,
    pub treatment: ArmSummary,
    pub estimates: Vec<Option<f64>>,
}

fn converged_effect(fit: Result<crate::ppsh::PpshFit>) -> Option<f64> {
    fit.ok().filter(|f| f.converged).map(|f| f.treatment_effect())
}

/// Runs every method on replicate `r`.
pub fn run_replicate(cfg: &SimConfig, methods: &[Method], r: u64) -> Result<ReplicateOutcome> {
    let ds = simulate_replicate(cfg, r)?;
    let placebo = arm_summary(&ds, Arm::Control, cfg.tau);
    let treatment = arm_summary(&ds, Arm::Treated, cfg.tau);

    let needs_hypo = methods.contains(&Method::HypotheticalCox);
    let hypo = if needs_hypo {
        Some(simulate_hypothetical(cfg, r)?)
    } else {
        None
    };
    let needs_marginals = methods.iter().any(|m| m.working_gamma().is_some());
    let marginals = if needs_marginals {
        estimate_marginals(&ds).ok()
    } else {
        None
    };

    let estimates = methods
        .iter()
        .map(|m| match m {
            Method::HypotheticalCox => {
                converged_effect(fit_cause_specific(hypo.as_ref().expect("generated above")))
            }
            Method::CauseSpecificCox => converged_effect(fit_cause_specific(&ds)),
            Method::Ppsh { gamma } => {
                let (death, event_free) = marginals.as_ref()?;
                let frailty = FrailtyGamma::new(*gamma).ok()?;
                let hazards = ConditionalHazards::from_marginals(death, event_free, frailty).ok()?;
                let w = ps_weights_from_hazards(&ds, &hazards, frailty, CurveEvaluation::default())
                    .ok()?;
                converged_effect(fit_ppsh(&ds, &w, None))
            }
        })
        .collect();
    Ok(ReplicateOutcome {
        placebo,
        treatment,
        estimates,
    })
}

/// Runs `f` on a dedicated pool of `workers` threads (the global pool when
/// `None`).
pub fn with_workers<T, F>(workers: Option<usize>, f: F) -> Result<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    match workers {
        None => Ok(f()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Monte Carlo study: `r` independent replicates of `cfg`, each analysed by
/// every method. Bias is measured against `log r_ps` for gamma frailty and
/// against the mean hypothetical estimate for inverse-Gaussian frailty.
/// Results are identical for any worker count.
pub fn replicate(
    cfg: &SimConfig,
    r: usize,
    methods: &[Method],
    seed: u64,
    workers: Option<usize>,
) -> Result<ReplicationReport> {
    if r < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 replicates, got {r}")));
    }
    let cfg = SimConfig {
        seed,
        ..cfg.clone()
    };
    cfg.validate()?;
    let outcomes: Vec<Result<ReplicateOutcome>> = with_workers(workers, || {
        (0..r as u64)
            .into_par_iter()
            .map(|k| run_replicate(&cfg, methods, k))
            .collect()
    })?;
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    let placebo = average_summaries(&outcomes.iter().map(|o| o.placebo.clone()).collect::<Vec<_>>());
    let treatment =
        average_summaries(&outcomes.iter().map(|o| o.treatment.clone()).collect::<Vec<_>>());

    let per_method: Vec<Vec<f64>> = (0..methods.len())
        .map(|m| outcomes.iter().filter_map(|o| o.estimates[m]).collect())
        .collect();

    let hypo_idx = methods.iter().position(|m| *m == Method::HypotheticalCox);
    let (reference, reference_kind) = match (cfg.frailty_family, hypo_idx) {
        (FrailtyFamily::InverseGaussian, Some(h)) if !per_method[h].is_empty() => {
            (mean(&per_method[h]), "hypothetical-mean")
        }
        _ => (cfg.r_ps.ln(), "log-r"),
    };

    let methods = methods
        .iter()
        .zip(&per_method)
        .map(|(m, est)| {
            let (mean_estimate, sd) = if est.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                (mean(est), sample_sd(est))
            };
            MethodSummary {
                method: m.label(),
                working_gamma: m.working_gamma(),
                converged: est.len(),
                failed: r - est.len(),
                mean_estimate,
                sd,
                mc_se: sd / (est.len() as f64).sqrt(),
                bias: mean_estimate - reference,
                hazard_ratio: mean_estimate.exp(),
            }
        })
        .collect();

    Ok(ReplicationReport {
        config: cfg,
        replicates: r,
        reference,
        reference_kind: reference_kind.into(),
        placebo,
        treatment,
        methods,
    })
}

impl ReplicationReport {
    /// One row per method: `gamma,lambda0,frailty,method,gamma_tilde,estimate,bias,se,hr,converged`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record([
            "gamma",
            "lambda0",
            "frailty",
            "method",
            "gamma_tilde",
            "estimate",
            "bias",
            "se",
            "hr",
            "converged",
        ])?;
        let family = match self.config.frailty_family {
            FrailtyFamily::Gamma => "gamma",
            FrailtyFamily::InverseGaussian => "inverse-gaussian",
        };
        for m in &self.methods {
            wtr.write_record([
                self.config.gamma.to_string(),
                self.config.lambda0.to_string(),
                family.to_string(),
                m.method.clone(),
                m.working_gamma.map(|g| g.to_string()).unwrap_or_default(),
                format!("{:.4}", m.mean_estimate),
                format!("{:.4}", m.bias),
                format!("{:.4}", m.mc_se),
                format!("{:.3}", m.hazard_ratio),
                m.converged.to_string(),
            ])?;
        }
        wtr.flush().map_err(|source| Error::Io {
            path: "<writer>".into(),
            source,
        })?;
        Ok(())
    }
}

/// Share of replicates in which the proportionality test does not reject.
#[derive(Debug, Clone, Serialize)]
pub struct PropCalibration {
    pub replicates: usize,
    pub tested: usize,
    pub non_rejection_rate: f64,
    pub alpha: f64,
}

/// Proportionality test of the plain Cox model on mortality-free trials
/// (`lambda0 = lambda1 = 0`) generated from `cfg`.
pub fn prop_test_calibration(
    cfg: &SimConfig,
    r: usize,
    transform: TimeTransform,
    alpha: f64,
    seed: u64,
    workers: Option<usize>,
) -> Result<PropCalibration> {
    let cfg = SimConfig {
        seed,
        ..cfg.hypothetical()
    };
    cfg.validate()?;
    let p_values: Vec<Option<f64>> = with_workers(workers, || {
        (0..r as u64)
            .into_par_iter()
            .map(|k| {
                let ds = simulate_replicate(&cfg, k).ok()?;
                let w = PsWeightTable::unit(&ds);
                let fit = fit_ppsh(&ds, &w, None).ok().filter(|f| f.converged)?;
                prop_test(&ds, &w, &fit, transform).ok().map(|t| t.p_value)
            })
            .collect()
    })?;
    let tested: Vec<f64> = p_values.into_iter().flatten().collect();
    let kept = tested.iter().filter(|&&p| p >= alpha).count();
    Ok(PropCalibration {
        replicates: r,
        tested: tested.len(),
        non_rejection_rate: kept as f64 / tested.len() as f64,
        alpha,
    })
}
