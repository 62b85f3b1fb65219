//! Subcommand implementations. Each returns whether every fit converged.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use ppsh_core::copula::{
    copula_ps_weights, fit_assessment, fit_mple_with_se, write_fit_assessment, CopulaFamily,
    CopulaKind, MarginalScope, MpleFit, NestedClayton,
};
use ppsh_core::frailty_ps::{build_ps_weights, FrailtyGamma, PsWeightTable, DEFAULT_GAMMA_GRID};
use ppsh_core::ppsh::{
    bootstrap_statistic, fit_ppsh, summarize_bootstrap, PpshFit,
};
use ppsh_core::schoenfeld::{prop_test, PropTestResult, TimeTransform};
use ppsh_core::simgen::{
    prop_test_calibration, replicate, simulate_hypothetical, simulate_trial, with_workers, Method,
};
use ppsh_core::survdata::{load_dataset, save_dataset, Dataset};

use crate::config::Options;

/// Whether all fits behind the written outputs converged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    NotConverged,
}

impl Status {
    fn from_flag(ok: bool) -> Status {
        if ok {
            Status::Converged
        } else {
            Status::NotConverged
        }
    }
}

const TABLE_WORKING_GAMMAS: [f64; 3] = [0.5, 2.0, 5.0];
const VARSIGMA1_GRID: [f64; 4] = [2.0, 3.0, 5.0, 8.0];

fn output_dir(opts: &Options) -> Result<PathBuf> {
    let dir = opts.output_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(create(path)?, value)
        .with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load(opts: &Options) -> Result<Dataset> {
    let path = opts.input()?;
    Ok(load_dataset(path)?)
}

pub fn simulate(opts: &Options, hypothetical: bool) -> Result<Status> {
    let cfg = opts.sim_config()?;
    let dir = output_dir(opts)?;
    let ds = if hypothetical {
        simulate_hypothetical(&cfg, 0)?
    } else {
        simulate_trial(&cfg)?
    };
    let path = dir.join("dataset.csv");
    save_dataset(&ds, &path)?;
    println!("wrote {}", path.display());
    write_json(&dir.join("simulate_config.json"), &cfg)?;
    Ok(Status::Converged)
}

/// One row of a fit table: the cause-specific model or a principal stratum
/// model identified by its working frailty or copula parameters.
#[derive(Debug, Clone, Serialize)]
pub struct FitRow {
    pub approach: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_tilde: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub varsigma0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub varsigma1: Option<f64>,
    pub beta: f64,
    pub se: Option<f64>,
    pub hr: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub bootstrap_used: usize,
    pub prop_p_value: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Serialize)]
struct FitReport {
    input: PathBuf,
    subjects: usize,
    events: usize,
    deaths: usize,
    level: f64,
    transform: TimeTransform,
    seed: u64,
    rows: Vec<FitRow>,
}

struct RowSpec<'a> {
    approach: &'static str,
    gamma_tilde: Option<f64>,
    varsigma: Option<(f64, f64)>,
    weights: &'a (dyn Fn(&Dataset) -> ppsh_core::Result<PsWeightTable> + Sync),
}

fn wald_se(fit: &PpshFit) -> Option<f64> {
    let inv = fit.information.clone().try_inverse()?;
    let v = inv[(0, 0)];
    (v > 0.0).then(|| v.sqrt())
}

fn fit_row(ds: &Dataset, spec: &RowSpec, opts: &Options) -> Result<FitRow> {
    let w = (spec.weights)(ds)?;
    let fit = fit_ppsh(ds, &w, None)?;
    let prop_p_value = prop_test(ds, &w, &fit, opts.transform())
        .ok()
        .map(|t| t.p_value);
    let b = opts.bootstrap.unwrap_or(0);
    let (mut ci_low, mut ci_high, mut used) = (None, None, 0);
    if b > 0 {
        let draws = with_workers(opts.workers()?, || {
            bootstrap_statistic(ds, b, opts.seed(), |sample| {
                let w = (spec.weights)(sample).ok()?;
                fit_ppsh(sample, &w, None)
                    .ok()
                    .filter(|f| f.converged)
                    .map(|f| f.treatment_effect())
            })
        })?;
        let summary = summarize_bootstrap(&draws, opts.level()?)?;
        ci_low = Some(summary.ci_low.exp());
        ci_high = Some(summary.ci_high.exp());
        used = summary.estimates.len();
    }
    Ok(FitRow {
        approach: spec.approach,
        gamma_tilde: spec.gamma_tilde,
        varsigma0: spec.varsigma.map(|v| v.0),
        varsigma1: spec.varsigma.map(|v| v.1),
        beta: fit.treatment_effect(),
        se: wald_se(&fit),
        hr: fit.hazard_ratio(),
        ci_low,
        ci_high,
        bootstrap_used: used,
        prop_p_value,
        iterations: fit.iterations,
        converged: fit.converged,
    })
}

fn unit_weights(ds: &Dataset) -> ppsh_core::Result<PsWeightTable> {
    Ok(PsWeightTable::unit(ds))
}

pub fn fit(opts: &Options) -> Result<Status> {
    let level = opts.level()?;
    let gammas = opts.gamma_grid(&DEFAULT_GAMMA_GRID)?;
    opts.workers()?;
    let ds = load(opts)?;
    let dir = output_dir(opts)?;

    let mut rows = vec![fit_row(
        &ds,
        &RowSpec {
            approach: "CS",
            gamma_tilde: None,
            varsigma: None,
            weights: &unit_weights,
        },
        opts,
    )?];
    for &g in &gammas {
        let frailty = FrailtyGamma::new(g)?;
        let weights = move |d: &Dataset| build_ps_weights(d, frailty);
        rows.push(fit_row(
            &ds,
            &RowSpec {
                approach: "PS",
                gamma_tilde: Some(g),
                varsigma: None,
                weights: &weights,
            },
            opts,
        )?);
    }
    let converged = rows.iter().all(|r| r.converged);
    write_json(
        &dir.join("fit.json"),
        &FitReport {
            input: opts.input()?.to_path_buf(),
            subjects: ds.len(),
            events: ds.n_events(),
            deaths: ds.n_deaths(),
            level,
            transform: opts.transform(),
            seed: opts.seed(),
            rows,
        },
    )?;
    Ok(Status::from_flag(converged))
}

pub fn replicate_cmd(opts: &Options) -> Result<Status> {
    let cfg = opts.sim_config()?;
    let gammas = opts.working_gammas(&TABLE_WORKING_GAMMAS)?;
    let r = opts.replicates.unwrap_or(1000);
    let workers = opts.workers()?;
    let dir = output_dir(opts)?;
    let report = replicate(&cfg, r, &Method::standard_set(&gammas), opts.seed(), workers)?;
    write_json(&dir.join("replicate.json"), &report)?;
    let csv_path = dir.join("replicate.csv");
    report.write_csv(create(&csv_path)?)?;
    println!("wrote {}", csv_path.display());
    Ok(Status::from_flag(report.methods.iter().all(|m| m.failed == 0)))
}

#[derive(Debug, Serialize)]
struct PropTestRow {
    approach: &'static str,
    gamma_tilde: Option<f64>,
    beta: f64,
    converged: bool,
    residuals_csv: String,
    #[serde(flatten)]
    test: PropTestSummary,
}

#[derive(Debug, Serialize)]
struct PropTestSummary {
    xi_hat: f64,
    chi_sq: f64,
    p_value: f64,
    reject: bool,
}

fn summary(t: &PropTestResult, alpha: f64) -> PropTestSummary {
    PropTestSummary {
        xi_hat: t.xi_hat,
        chi_sq: t.chi_sq,
        p_value: t.p_value,
        reject: t.p_value < alpha,
    }
}

/// Tests proportionality on `--input`, or without an input estimates the
/// test's non-rejection rate on mortality-free simulated trials.
pub fn proptest(opts: &Options) -> Result<Status> {
    let alpha = opts.alpha()?;
    let transform = opts.transform();
    if opts.input.is_none() {
        let cfg = opts.sim_config()?;
        let workers = opts.workers()?;
        let dir = output_dir(opts)?;
        let r = opts.replicates.unwrap_or(2000);
        let cal = prop_test_calibration(&cfg, r, transform, alpha, opts.seed(), workers)?;
        #[derive(Serialize)]
        struct Calibration<'a> {
            config: &'a ppsh_core::simgen::SimConfig,
            transform: TimeTransform,
            #[serde(flatten)]
            result: &'a ppsh_core::simgen::PropCalibration,
        }
        write_json(
            &dir.join("proptest_calibration.json"),
            &Calibration {
                config: &cfg,
                transform,
                result: &cal,
            },
        )?;
        return Ok(Status::from_flag(cal.tested == cal.replicates));
    }

    let gammas = opts.gamma_grid(&DEFAULT_GAMMA_GRID)?;
    let ds = load(opts)?;
    let dir = output_dir(opts)?;
    let mut specs: Vec<(&'static str, Option<f64>, PsWeightTable)> =
        vec![("CS", None, PsWeightTable::unit(&ds))];
    for &g in &gammas {
        specs.push(("PS", Some(g), build_ps_weights(&ds, FrailtyGamma::new(g)?)?));
    }
    let mut rows = Vec::new();
    for (approach, gamma_tilde, w) in specs {
        let fit = fit_ppsh(&ds, &w, None)?;
        let test = prop_test(&ds, &w, &fit, transform)?;
        let name = match gamma_tilde {
            None => "residuals_cs.csv".to_string(),
            Some(g) => format!("residuals_ps_gamma_{g}.csv"),
        };
        test.write_residuals_csv(create(&dir.join(&name))?)?;
        rows.push(PropTestRow {
            approach,
            gamma_tilde,
            beta: fit.treatment_effect(),
            converged: fit.converged,
            residuals_csv: name,
            test: summary(&test, alpha),
        });
    }
    let converged = rows.iter().all(|r| r.converged);
    #[derive(Serialize)]
    struct Report {
        transform: TimeTransform,
        alpha: f64,
        rows: Vec<PropTestRow>,
    }
    write_json(
        &dir.join("proptest.json"),
        &Report {
            transform,
            alpha,
            rows,
        },
    )?;
    Ok(Status::from_flag(converged))
}

#[derive(Debug, Serialize)]
struct CopulaReport {
    /// Family of the nested copula behind the principal stratum rows.
    ps_family: CopulaKind,
    /// Outer parameter used by the dependent rows (Clayton MPLE).
    varsigma0: f64,
    rows: Vec<FitRow>,
}

/// MPLE, fit assessment and the copula principal stratum table.
pub fn copula(opts: &Options) -> Result<Status> {
    let kind: CopulaKind = opts.copula.map(Into::into).unwrap_or(CopulaKind::Clayton);
    let scope: MarginalScope = opts.margins.map(Into::into).unwrap_or_default();
    opts.level()?;
    let workers = opts.workers()?;
    let ds = load(opts)?;
    let dir = output_dir(opts)?;
    let b = opts.bootstrap.unwrap_or(0);

    let mple = with_workers(workers, || fit_mple_with_se(&ds, kind, scope, b, opts.seed()))??;
    write_json(&dir.join("mple.json"), &mple)?;

    let fam = CopulaFamily::new(kind, mple.varsigma)?;
    let rows = fit_assessment(&ds, &fam)?;
    let fa_path = dir.join("fit_assessment.csv");
    write_fit_assessment(&rows, create(&fa_path)?)?;
    println!("wrote {}", fa_path.display());

    let clayton: MpleFit = if kind == CopulaKind::Clayton {
        mple.clone()
    } else {
        fit_mple_with_se(&ds, CopulaKind::Clayton, scope, 0, opts.seed())?
    };
    let s0 = clayton.varsigma;
    let grid: Vec<f64> = match &opts.varsigma1 {
        Some(v) => v.clone(),
        None => std::iter::once(s0)
            .chain(VARSIGMA1_GRID.iter().copied().filter(|&v| v > s0))
            .collect(),
    };
    // validate every requested pair before fitting any
    let mut nested = vec![NestedClayton::new(0.0, 0.0)?];
    for &s1 in &grid {
        nested.push(NestedClayton::new(s0, s1)?);
    }

    let mut out = vec![fit_row(
        &ds,
        &RowSpec {
            approach: "CS",
            gamma_tilde: None,
            varsigma: None,
            weights: &unit_weights,
        },
        opts,
    )?];
    for nc in nested {
        let weights = move |d: &Dataset| copula_ps_weights(d, &nc);
        out.push(fit_row(
            &ds,
            &RowSpec {
                approach: "PS",
                gamma_tilde: None,
                varsigma: Some((nc.varsigma0, nc.varsigma1)),
                weights: &weights,
            },
            opts,
        )?);
    }
    let converged = out.iter().all(|r| r.converged);
    write_json(
        &dir.join("copula_fit.json"),
        &CopulaReport {
            ps_family: CopulaKind::Clayton,
            varsigma0: s0,
            rows: out,
        },
    )?;
    if mple.at_boundary {
        eprintln!(
            "warning: {} MPLE {} lies on the edge of the search range",
            kind.name(),
            mple.varsigma
        );
    }
    Ok(Status::from_flag(converged))
}

pub fn ensure_no_extra_input(opts: &Options, command: &str) -> Result<()> {
    if opts.input.is_some() {
        bail!("{command} does not read --input");
    }
    Ok(())
}
