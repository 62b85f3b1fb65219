//! Run configuration: command-line flags layered over an optional JSON file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Deserialize;

use ppsh_core::copula::{CopulaKind, MarginalScope};
use ppsh_core::schoenfeld::TimeTransform;
use ppsh_core::simgen::{FrailtyFamily, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrailtyArg {
    Gamma,
    #[value(alias = "inverse-gaussian")]
    #[serde(alias = "inverse-gaussian")]
    Ig,
}

impl From<FrailtyArg> for FrailtyFamily {
    fn from(f: FrailtyArg) -> Self {
        match f {
            FrailtyArg::Gamma => FrailtyFamily::Gamma,
            FrailtyArg::Ig => FrailtyFamily::InverseGaussian,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformArg {
    T,
    Log,
    Rank,
}

impl From<TransformArg> for TimeTransform {
    fn from(g: TransformArg) -> Self {
        match g {
            TransformArg::T => TimeTransform::Identity,
            TransformArg::Log => TimeTransform::Log,
            TransformArg::Rank => TimeTransform::Rank,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CopulaArg {
    Clayton,
    Gumbel,
    Frank,
}

impl From<CopulaArg> for CopulaKind {
    fn from(c: CopulaArg) -> Self {
        match c {
            CopulaArg::Clayton => CopulaKind::Clayton,
            CopulaArg::Gumbel => CopulaKind::Gumbel,
            CopulaArg::Frank => CopulaKind::Frank,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScopeArg {
    Pooled,
    PerArm,
}

impl From<ScopeArg> for MarginalScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Pooled => MarginalScope::Pooled,
            ScopeArg::PerArm => MarginalScope::PerArm,
        }
    }
}

/// Every option any subcommand understands. Each field is optional so a
/// JSON file and the command line can be merged field by field.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Options {
    /// Input dataset CSV
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Directory receiving all outputs (created if missing)
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Master seed for every random draw
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frailty parameter: the generator's true value for simulate,
    /// replicate and calibration runs, the working grid for fit and proptest
    #[arg(long = "gamma", num_args = 1, value_delimiter = ',')]
    pub gamma: Option<Vec<f64>>,
    /// Working frailty parameters analysed by replicate
    #[arg(long = "working-gamma", num_args = 1, value_delimiter = ',')]
    pub working_gamma: Option<Vec<f64>>,
    /// Bootstrap resamples
    #[arg(long)]
    pub bootstrap: Option<usize>,
    /// Monte Carlo replicates
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long, value_enum)]
    pub frailty: Option<FrailtyArg>,
    /// Time transform of the proportionality test
    #[arg(long, value_enum)]
    pub g: Option<TransformArg>,
    #[arg(long, value_enum)]
    pub copula: Option<CopulaArg>,
    /// Marginals of the copula pseudo-observations
    #[arg(long, value_enum)]
    pub margins: Option<ScopeArg>,
    /// Counterfactual death-death dependence of the nested copula
    #[arg(long = "varsigma1", num_args = 1, value_delimiter = ',')]
    pub varsigma1: Option<Vec<f64>>,
    /// Worker threads for replicates and bootstrap resamples
    #[arg(long)]
    pub workers: Option<usize>,
    /// Confidence level of bootstrap intervals
    #[arg(long)]
    pub level: Option<f64>,
    /// Significance level of the proportionality test
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub lambda0: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub phi: Option<f64>,
    #[arg(long)]
    pub r_ps: Option<f64>,
}

macro_rules! overlay {
    ($flags:ident, $file:ident, $($field:ident),*) => {
        Options { $($field: $flags.$field.or($file.$field)),* }
    };
}

impl Options {
    /// Flags take precedence over the file.
    pub fn merged(self, file: Options) -> Options {
        let flags = self;
        overlay!(
            flags, file, input, output_dir, seed, gamma, working_gamma, bootstrap, replicates,
            frailty, g, copula, margins, varsigma1, workers, level, alpha, n, lambda0, lambda1,
            lambda_c, tau, phi, r_ps
        )
    }

    pub fn load_file(path: &Path) -> Result<Options> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config file {}", path.display()))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn input(&self) -> Result<&Path> {
        match &self.input {
            Some(p) => Ok(p),
            None => bail!("--input is required"),
        }
    }

    pub fn transform(&self) -> TimeTransform {
        self.g.map(Into::into).unwrap_or_default()
    }

    pub fn level(&self) -> Result<f64> {
        let level = self.level.unwrap_or(0.95);
        if !(level > 0.0 && level < 1.0) {
            bail!("--level must be in (0, 1), got {level}");
        }
        Ok(level)
    }

    pub fn alpha(&self) -> Result<f64> {
        let alpha = self.alpha.unwrap_or(0.05);
        if !(alpha > 0.0 && alpha < 1.0) {
            bail!("--alpha must be in (0, 1), got {alpha}");
        }
        Ok(alpha)
    }

    pub fn workers(&self) -> Result<Option<usize>> {
        match self.workers {
            Some(0) => bail!("--workers must be at least 1"),
            w => Ok(w),
        }
    }

    /// Working frailty grid, validated positive.
    pub fn gamma_grid(&self, default: &[f64]) -> Result<Vec<f64>> {
        positive_list("--gamma", self.gamma.clone().unwrap_or_else(|| default.to_vec()))
    }

    pub fn working_gammas(&self, default: &[f64]) -> Result<Vec<f64>> {
        positive_list(
            "--working-gamma",
            self.working_gamma.clone().unwrap_or_else(|| default.to_vec()),
        )
    }

    /// Generator configuration; `--gamma` must hold a single value here.
    pub fn sim_config(&self) -> Result<SimConfig> {
        let d = SimConfig::default();
        let gamma = match self.gamma.as_deref() {
            None => d.gamma,
            Some([g]) => *g,
            Some(gs) => bail!("the generator takes a single --gamma, got {}", gs.len()),
        };
        let cfg = SimConfig {
            lambda0: self.lambda0.unwrap_or(d.lambda0),
            lambda1: self.lambda1.unwrap_or(d.lambda1),
            lambda_c: self.lambda_c.unwrap_or(d.lambda_c),
            tau: self.tau.unwrap_or(d.tau),
            phi: self.phi.unwrap_or(d.phi),
            r_ps: self.r_ps.unwrap_or(d.r_ps),
            gamma,
            frailty_family: self.frailty.map(Into::into).unwrap_or_default(),
            n: self.n.unwrap_or(d.n),
            seed: self.seed(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn positive_list(flag: &str, values: Vec<f64>) -> Result<Vec<f64>> {
    if values.is_empty() {
        bail!("{flag} needs at least one value");
    }
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        bail!("{flag} values must be positive and finite, got {v}");
    }
    Ok(values)
}
