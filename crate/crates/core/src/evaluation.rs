//! Forecast metrics and comparison reports.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data_ingest::{CaseTable, Warnings};
use crate::days::{DayRange, Fips};
use crate::error::{Error, Result};

/// One county's next-day forecast made on `day`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub fips: Fips,
    /// Forecast origin; inputs end here.
    pub day: u32,
    pub target_day: u32,
    /// Predicted new cases on `target_day`, never negative.
    pub delta: f64,
    /// Predicted cumulative cases on `target_day`.
    pub caseload: f64,
}

impl Prediction {
    /// Caseload is the origin's cumulative count plus the predicted delta.
    pub fn from_delta(fips: Fips, day: u32, cum_on_day: u64, delta: f64) -> Self {
        let delta = delta.max(0.0);
        Prediction {
            fips,
            day,
            target_day: day + 1,
            delta,
            caseload: cum_on_day as f64 + delta,
        }
    }
}

/// Predictions of one method, as written by `forecast` and `baseline`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub model: String,
    pub predictions: Vec<Prediction>,
}

fn check_pair(a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < min {
        return Err(Error::Dimension(format!(
            "need at least {min} values, got {}",
            a.len()
        )));
    }
    Ok(())
}

/// Root mean squared log1p error. Inputs must be non-negative.
pub fn rmsle(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_pair(pred, actual, 1)?;
    if let Some(v) = pred
        .iter()
        .chain(actual)
        .find(|v| !v.is_finite() || **v < 0.0)
    {
        return Err(Error::Validation(format!(
            "rmsle needs finite non-negative values, got {v}"
        )));
    }
    let sse: f64 = pred
        .iter()
        .zip(actual)
        .map(|(p, a)| (p.ln_1p() - a.ln_1p()).powi(2))
        .sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Sample Pearson correlation; `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check_pair(x, y, 2)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    pub rmsle: f64,
    pub corr: Option<f64>,
    pub delta_rmsle: f64,
    pub delta_corr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub counties: Vec<Fips>,
    pub days: DayRange,
    pub pairs: usize,
    pub models: Vec<ModelMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalScope {
    pub top: usize,
    /// Forecast origins; truth is read on the following day.
    pub days: DayRange,
}

impl Default for EvalScope {
    fn default() -> Self {
        EvalScope {
            top: 20,
            days: DayRange {
                start: 120,
                end: 150,
            },
        }
    }
}

/// The `k` most populous counties. Without population data, counties are
/// ranked by cumulative cases on `as_of` instead. Ties go to the smaller fips.
pub fn top_counties(truth: &CaseTable, k: usize, as_of: u32) -> Result<(Vec<Fips>, Warnings)> {
    let mut warnings = Vec::new();
    let mut ranked: Vec<(u64, Fips)> = if truth.populations.is_empty() {
        warnings.push(format!(
            "no population data; ranking counties by cumulative cases on day {as_of}"
        ));
        truth
            .counties
            .values()
            .map(|s| (s.cum_cases_at(as_of).unwrap_or(0), s.fips))
            .collect()
    } else {
        let missing = truth
            .counties
            .keys()
            .filter(|f| !truth.populations.contains_key(f))
            .count();
        if missing > 0 {
            warnings.push(format!(
                "{missing} counties without population are not ranked"
            ));
        }
        truth
            .counties
            .keys()
            .filter_map(|f| truth.populations.get(f).map(|&p| (p, *f)))
            .collect()
    };
    if ranked.len() < k {
        return Err(Error::Selection(format!(
            "{k} counties requested, {} available",
            ranked.len()
        )));
    }
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut top: Vec<Fips> = ranked.into_iter().take(k).map(|(_, f)| f).collect();
    top.sort();
    Ok((top, warnings))
}

/// Metrics pooled over every (county, origin day) pair of the scope.
pub fn evaluate_counties(
    model: &str,
    predictions: &[Prediction],
    truth: &CaseTable,
    counties: &[Fips],
    days: DayRange,
) -> Result<ModelMetrics> {
    let index: BTreeMap<(Fips, u32), &Prediction> =
        predictions.iter().map(|p| ((p.fips, p.day), p)).collect();
    let mut gaps = Vec::new();
    let (mut pc, mut tc, mut pd, mut td) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &fips in counties {
        for day in days.days() {
            let Some(p) = index.get(&(fips, day)) else {
                gaps.push(format!("{fips}@{day}"));
                continue;
            };
            let target = day + 1;
            pc.push(p.caseload.max(0.0));
            tc.push(truth.cum_cases(fips, target)? as f64);
            pd.push(p.delta.max(0.0));
            td.push(truth.delta_cases(fips, target)?.max(0) as f64);
        }
    }
    if !gaps.is_empty() {
        return Err(Error::Coverage {
            count: gaps.len(),
            listing: gaps.iter().take(20).cloned().collect::<Vec<_>>().join(", "),
        });
    }
    let corr = |a: &[f64], b: &[f64]| -> Result<Option<f64>> {
        if a.len() < 2 {
            Ok(None)
        } else {
            pearson(a, b)
        }
    };
    Ok(ModelMetrics {
        model: model.to_string(),
        rmsle: rmsle(&pc, &tc)?,
        corr: corr(&pc, &tc)?,
        delta_rmsle: rmsle(&pd, &td)?,
        delta_corr: corr(&pd, &td)?,
    })
}

/// Report over the top-k counties for one or more prediction sets.
pub fn evaluate(
    sets: &[PredictionSet],
    truth: &CaseTable,
    scope: EvalScope,
) -> Result<(EvalReport, Warnings)> {
    if scope.days.is_empty() || scope.top == 0 {
        return Err(Error::Config("evaluation scope is empty".into()));
    }
    let names: BTreeSet<&str> = sets.iter().map(|s| s.model.as_str()).collect();
    if names.len() != sets.len() {
        return Err(Error::Config("duplicate model names".into()));
    }
    let (counties, warnings) = top_counties(truth, scope.top, scope.days.end)?;
    let models = sets
        .iter()
        .map(|s| evaluate_counties(&s.model, &s.predictions, truth, &counties, scope.days))
        .collect::<Result<_>>()?;
    Ok((
        EvalReport {
            pairs: counties.len() * scope.days.len(),
            counties,
            days: scope.days,
            models,
        },
        warnings,
    ))
}
