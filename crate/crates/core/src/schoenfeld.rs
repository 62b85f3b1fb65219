//! Proportionality diagnostics for the weighted partial likelihood.
//!
//! Residual `s_j = p_(j)j (Z_(j) - Zbar(t_j; b))` per event, scaled residual
//! `V_j^-1 s_j`, and the score-type test of `xi = 0` in
//! `beta(t) = beta + xi g(t)` for the treatment coefficient:
//! `chi2 = (sum g s)^2 / sum g V g` with `g` centered at its `V`-weighted
//! mean.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::frailty_ps::PsWeightTable;
use crate::ppsh::{PpshFit, WeightedPartialLikelihood};
use crate::survdata::Dataset;

/// Transform of the time axis in the proportionality test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeTransform {
    /// `g(t) = t`
    #[default]
    #[serde(alias = "t")]
    Identity,
    /// `g(t) = log t`
    Log,
    /// Rank of the event time among all events (ties share the mean rank).
    Rank,
}

impl TimeTransform {
    pub fn apply(self, times: &[f64]) -> Result<Vec<f64>> {
        match self {
            TimeTransform::Identity => Ok(times.to_vec()),
            TimeTransform::Log => times
                .iter()
                .map(|&t| {
                    if t > 0.0 {
                        Ok(t.ln())
                    } else {
                        Err(Error::InvalidParameter(format!(
                            "log transform needs positive event times, got {t}"
                        )))
                    }
                })
                .collect(),
            TimeTransform::Rank => {
                let mut out = vec![0.0; times.len()];
                let mut order: Vec<usize> = (0..times.len()).collect();
                order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
                let mut k = 0;
                while k < order.len() {
                    let mut j = k;
                    while j < order.len() && times[order[j]] == times[order[k]] {
                        j += 1;
                    }
                    let rank = (k + 1 + j) as f64 / 2.0;
                    for &i in &order[k..j] {
                        out[i] = rank;
                    }
                    k = j;
                }
                Ok(out)
            }
        }
    }
}

/// One Schoenfeld residual for the treatment coefficient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualRow {
    pub time: f64,
    pub residual: f64,
    /// `residual / V_j`; absent when the weighted variance is zero.
    pub scaled: Option<f64>,
    pub g: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PropTestResult {
    pub xi_hat: f64,
    pub chi_sq: f64,
    pub p_value: f64,
    pub transform: TimeTransform,
    pub residuals: Vec<ResidualRow>,
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi_sq1_upper_tail(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        erfc((x / 2.0).sqrt())
    }
}

/// Residual vectors `(t_j, s_j)`, one per event (tied events separately).
pub fn schoenfeld_residuals(
    ds: &Dataset,
    weights: &PsWeightTable,
    beta: &[f64],
) -> Result<Vec<(f64, Vec<f64>)>> {
    let pl = WeightedPartialLikelihood::new(ds, weights)?;
    Ok(pl
        .event_terms(&DVector::from_column_slice(beta))
        .into_iter()
        .map(|t| (t.time, (t.centered * t.weight).iter().copied().collect()))
        .collect())
}

/// Tests proportionality of the treatment effect at the fitted `beta`.
pub fn prop_test(
    ds: &Dataset,
    weights: &PsWeightTable,
    fit: &PpshFit,
    transform: TimeTransform,
) -> Result<PropTestResult> {
    let pl = WeightedPartialLikelihood::new(ds, weights)?;
    let terms = pl.event_terms(&DVector::from_column_slice(&fit.beta));
    if terms.is_empty() {
        return Err(Error::NoEvents);
    }
    let times: Vec<f64> = terms.iter().map(|t| t.time).collect();
    let g_raw = transform.apply(&times)?;
    let s: Vec<f64> = terms.iter().map(|t| t.weight * t.centered[0]).collect();
    let v: Vec<f64> = terms.iter().map(|t| t.variance[(0, 0)]).collect();
    prop_test_from_parts(&times, &s, &v, &g_raw, transform)
}

/// The test statistic from per-event residuals `s`, variances `v` and
/// transformed times `g`.
pub fn prop_test_from_parts(
    times: &[f64],
    s: &[f64],
    v: &[f64],
    g: &[f64],
    transform: TimeTransform,
) -> Result<PropTestResult> {
    let sum_v: f64 = v.iter().sum();
    if sum_v <= 0.0 {
        return Err(Error::Singular("all weighted variances are zero".into()));
    }
    let g_bar = v.iter().zip(g).map(|(vj, gj)| vj * gj).sum::<f64>() / sum_v;
    let gc: Vec<f64> = g.iter().map(|gj| gj - g_bar).collect();
    let gvg: f64 = gc.iter().zip(v).map(|(gj, vj)| gj * vj * gj).sum();
    let gs: f64 = gc.iter().zip(s).map(|(gj, sj)| gj * sj).sum();
    let uncentered: f64 = g.iter().zip(v).map(|(gj, vj)| gj * vj * gj).sum();
    if !(gvg > 1e-12 * uncentered) || gvg <= 0.0 {
        return Err(Error::Singular(
            "sum of g V g vanishes; the time transform is constant over events".into(),
        ));
    }
    let chi_sq = gs * gs / gvg;
    let residuals = times
        .iter()
        .zip(s)
        .zip(v)
        .zip(g)
        .map(|(((&time, &residual), &variance), &g)| ResidualRow {
            time,
            residual,
            scaled: (variance > 0.0).then(|| residual / variance),
            g,
            variance,
        })
        .collect();
    Ok(PropTestResult {
        xi_hat: gs / gvg,
        chi_sq,
        p_value: chi_sq1_upper_tail(chi_sq),
        transform,
        residuals,
    })
}

impl PropTestResult {
    /// Residual table `t_j,s_j,s_scaled_j,g_t_j`.
    pub fn write_residuals_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["t_j", "s_j", "s_scaled_j", "g_t_j"])?;
        for r in &self.residuals {
            wtr.write_record([
                r.time.to_string(),
                r.residual.to_string(),
                r.scaled.map(|x| x.to_string()).unwrap_or_default(),
                r.g.to_string(),
            ])?;
        }
        wtr.flush().map_err(|source| Error::Io {
            path: "<writer>".into(),
            source,
        })?;
        Ok(())
    }
}
