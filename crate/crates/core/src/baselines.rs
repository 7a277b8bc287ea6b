//! Naive and ARIMA baselines on per-county daily new cases.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data_ingest::{CaseTable, Warnings};
use crate::days::{DayRange, Fips};
use crate::error::{Error, Result};
use crate::evaluation::Prediction;
use crate::exec::Execution;

/// "Previous Cases": no new cases tomorrow.
pub fn prev_cases(cases: &CaseTable, t: u32) -> Result<Vec<Prediction>> {
    cases
        .counties
        .keys()
        .map(|&f| Ok(Prediction::from_delta(f, t, cases.cum_cases(f, t)?, 0.0)))
        .collect()
}

/// "Previous Delta": tomorrow repeats today's delta.
pub fn prev_delta(cases: &CaseTable, t: u32) -> Result<Vec<Prediction>> {
    if t == 0 {
        return Err(Error::Range("previous delta needs t >= 1".into()));
    }
    cases
        .counties
        .keys()
        .map(|&f| {
            let delta = cases.delta_cases(f, t)?.max(0) as f64;
            Ok(Prediction::from_delta(f, t, cases.cum_cases(f, t)?, delta))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl ArimaOrder {
    pub const fn new(p: usize, d: usize, q: usize) -> Self {
        ArimaOrder { p, d, q }
    }

    /// Free parameters counted by the information criteria: AR, MA and constant.
    pub fn n_params(&self) -> usize {
        self.p + self.q + 1
    }

    fn min_fit_len(&self) -> usize {
        self.p + self.q + self.d + 11
    }
}

impl Default for ArimaOrder {
    fn default() -> Self {
        ArimaOrder::new(7, 1, 3)
    }
}

impl fmt::Display for ArimaOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.p, self.d, self.q)
    }
}

impl FromStr for ArimaOrder {
    type Err = Error;

    /// Parses `p,d,q`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s
            .trim_matches(['(', ')'])
            .split(',')
            .map(str::trim)
            .collect();
        let bad = || Error::Usage(format!("order {s:?} is not p,d,q"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let n: Vec<usize> = parts
            .iter()
            .map(|p| p.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        Ok(ArimaOrder::new(n[0], n[1], n[2]))
    }
}

/// A fitted constant-trend ARIMA model on the `d`-times differenced series
/// `w_t = c + Σ phi_i w_{t-i} + Σ theta_j e_{t-j} + e_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaModel {
    pub order: ArimaOrder,
    pub c: f64,
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
    pub sigma2: f64,
    /// First differenced index with a residual; earlier residuals are zero.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArimaFit {
    pub model: ArimaModel,
    /// Residuals over the differenced series, zero before `model.offset`.
    pub residuals: Vec<f64>,
    /// Conditional sum of squares.
    pub css: f64,
    /// Best objective after each simplex iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl ArimaFit {
    pub fn n_residuals(&self) -> usize {
        self.residuals.len() - self.model.offset
    }

    /// Gaussian log-likelihood implied by the CSS residual variance.
    pub fn log_likelihood(&self) -> f64 {
        let n = self.n_residuals() as f64;
        -0.5 * n * ((2.0 * std::f64::consts::PI * self.model.sigma2).ln() + 1.0)
    }

    pub fn aic(&self) -> f64 {
        2.0 * self.model.order.n_params() as f64 - 2.0 * self.log_likelihood()
    }

    pub fn bic(&self) -> f64 {
        self.model.order.n_params() as f64 * (self.n_residuals() as f64).ln()
            - 2.0 * self.log_likelihood()
    }
}

pub fn difference(y: &[f64], d: usize) -> Vec<f64> {
    let mut w = y.to_vec();
    for _ in 0..d {
        w = w.windows(2).map(|p| p[1] - p[0]).collect();
    }
    w
}

fn unpack(order: ArimaOrder, x: &[f64]) -> (f64, &[f64], &[f64]) {
    (x[0], &x[1..1 + order.p], &x[1 + order.p..])
}

fn predict_at(w: &[f64], e: &[f64], t: usize, c: f64, phi: &[f64], theta: &[f64]) -> f64 {
    let mut pred = c;
    for (i, a) in phi.iter().enumerate() {
        pred += a * w[t - 1 - i];
    }
    for (j, b) in theta.iter().enumerate() {
        if let Some(s) = t.checked_sub(j + 1) {
            pred += b * e[s];
        }
    }
    pred
}

/// CSS residual recursion starting at `offset`.
fn residuals(w: &[f64], offset: usize, c: f64, phi: &[f64], theta: &[f64]) -> Vec<f64> {
    let mut e = vec![0.0; w.len()];
    for t in offset..w.len() {
        e[t] = w[t] - predict_at(w, &e, t, c, phi, theta);
    }
    e
}

/// Whether `1 - a_1 z - ... - a_p z^p` has every root outside the unit
/// circle, by stepping down to reflection coefficients.
pub fn is_stable(a: &[f64]) -> bool {
    let mut a = a.to_vec();
    while let Some(&kappa) = a.last() {
        if kappa.is_nan() || kappa.abs() >= 1.0 {
            return false;
        }
        let k = a.len() - 1;
        let denom = 1.0 - kappa * kappa;
        a = (0..k)
            .map(|j| (a[j] + kappa * a[k - 1 - j]) / denom)
            .collect();
    }
    true
}

fn admissible(phi: &[f64], theta: &[f64]) -> bool {
    let neg: Vec<f64> = theta.iter().map(|t| -t).collect();
    is_stable(phi) && is_stable(&neg)
}

fn css(w: &[f64], offset: usize, c: f64, phi: &[f64], theta: &[f64]) -> f64 {
    if !admissible(phi, theta) {
        return f64::INFINITY;
    }
    let s: f64 = residuals(w, offset, c, phi, theta)[offset..]
        .iter()
        .map(|r| r * r)
        .sum();
    if s.is_finite() {
        s
    } else {
        f64::INFINITY
    }
}

/// Least-squares AR(p) with intercept; returns `[c, phi_1..phi_p]`.
fn least_squares_ar(w: &[f64], p: usize, offset: usize) -> Vec<f64> {
    let rows = w.len() - offset;
    let x = DMatrix::from_fn(rows, p + 1, |r, col| {
        if col == 0 {
            1.0
        } else {
            w[offset + r - col]
        }
    });
    let y = DVector::from_iterator(rows, w[offset..].iter().copied());
    match x.svd(true, true).solve(&y, 1e-10) {
        Ok(beta) if beta.iter().all(|v| v.is_finite()) => beta.iter().copied().collect(),
        _ => {
            let mean = w[offset..].iter().sum::<f64>() / rows as f64;
            std::iter::once(mean)
                .chain(std::iter::repeat_n(0.0, p))
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimplexConfig {
    pub max_iterations: usize,
    /// Stop when the spread of vertex objectives falls below
    /// `tolerance * (1 + |best|)`.
    pub tolerance: f64,
    pub restarts: usize,
}

impl Default for SimplexConfig {
    fn default() -> Self {
        SimplexConfig {
            max_iterations: 5000,
            tolerance: 1e-8,
            restarts: 2,
        }
    }
}

struct SimplexResult {
    x: Vec<f64>,
    f: f64,
    trace: Vec<f64>,
    converged: bool,
    iterations: usize,
}

/// Derivative-free Nelder-Mead minimization with standard coefficients.
fn nelder_mead(
    f: impl Fn(&[f64]) -> f64,
    x0: &[f64],
    steps: &[f64],
    cfg: SimplexConfig,
) -> SimplexResult {
    let n = x0.len();
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut best = (x0.to_vec(), f(x0));
    let mut converged = false;
    for _ in 0..=cfg.restarts {
        let mut simplex: Vec<(Vec<f64>, f64)> = vec![best.clone()];
        for i in 0..n {
            let mut x = best.0.clone();
            x[i] += steps[i];
            let fx = f(&x);
            simplex.push((x, fx));
        }
        let start = best.1;
        converged = false;
        while iterations < cfg.max_iterations {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let (lo, hi) = (simplex[0].1, simplex[n].1);
            if (hi - lo).abs() <= cfg.tolerance * (1.0 + lo.abs()) || hi == lo {
                converged = true;
                break;
            }
            iterations += 1;
            let centroid: Vec<f64> = (0..n)
                .map(|j| simplex[..n].iter().map(|v| v.0[j]).sum::<f64>() / n as f64)
                .collect();
            let along = |s: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[n].0)
                    .map(|(c, w)| c + s * (w - c))
                    .collect()
            };
            let xr = along(-1.0);
            let fr = f(&xr);
            if fr < simplex[0].1 {
                let xe = along(-2.0);
                let fe = f(&xe);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
            } else {
                let (xc, fc) = if fr < simplex[n].1 {
                    let x = along(-0.5);
                    let fx = f(&x);
                    (x, fx)
                } else {
                    let x = along(0.5);
                    let fx = f(&x);
                    (x, fx)
                };
                if fc < simplex[n].1.min(fr) {
                    simplex[n] = (xc, fc);
                } else {
                    let x0 = simplex[0].0.clone();
                    for v in simplex.iter_mut().skip(1) {
                        v.0 = x0
                            .iter()
                            .zip(&v.0)
                            .map(|(a, b)| a + 0.5 * (b - a))
                            .collect();
                        v.1 = f(&v.0);
                    }
                }
            }
            let lo = simplex.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
            trace.push(lo.min(best.1));
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[0].1 < best.1 {
            best = simplex[0].clone();
        }
        if !converged || start - best.1 <= cfg.tolerance * (1.0 + best.1.abs()) {
            break;
        }
    }
    SimplexResult {
        x: best.0,
        f: best.1,
        trace,
        converged,
        iterations,
    }
}

/// Conditional-sum-of-squares fit with the default conditioning offset `p`.
/// The search is restricted to stationary AR and invertible MA polynomials.
pub fn arima_fit(series: &[f64], order: ArimaOrder) -> Result<ArimaFit> {
    arima_fit_with(series, order, order.p, SimplexConfig::default())
}

/// CSS fit with residuals starting at differenced index `offset` (at least `p`).
pub fn arima_fit_with(
    series: &[f64],
    order: ArimaOrder,
    offset: usize,
    cfg: SimplexConfig,
) -> Result<ArimaFit> {
    if series.len() < order.min_fit_len() {
        return Err(Error::Range(format!(
            "ARIMA{order} needs more than {} observations, got {}",
            order.min_fit_len() - 1,
            series.len()
        )));
    }
    if let Some(v) = series.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("series value {v}")));
    }
    let w = difference(series, order.d);
    let offset = offset.max(order.p);
    if offset + 1 >= w.len() {
        return Err(Error::Range(format!("offset {offset} leaves no residuals")));
    }

    let mut x0 = least_squares_ar(&w, order.p, offset);
    for _ in 0..100 {
        if is_stable(&x0[1..]) {
            break;
        }
        x0[1..].iter_mut().for_each(|v| *v *= 0.9);
    }
    if !is_stable(&x0[1..]) {
        x0[1..].fill(0.0);
    }
    x0.extend(std::iter::repeat_n(0.0, order.q));
    let mean = w[offset..].iter().sum::<f64>() / (w.len() - offset) as f64;
    let sd = (w[offset..].iter().map(|v| (v - mean).powi(2)).sum::<f64>()
        / (w.len() - offset) as f64)
        .sqrt();
    let mut steps = vec![0.1; x0.len()];
    steps[0] = (0.1 * x0[0].abs()).max(0.1 * sd).max(1e-3);

    let objective = |x: &[f64]| {
        let (c, phi, theta) = unpack(order, x);
        css(&w, offset, c, phi, theta)
    };
    let res = nelder_mead(objective, &x0, &steps, cfg);
    let (c, phi, theta) = unpack(order, &res.x);
    let e = residuals(&w, offset, c, phi, theta);
    let sse: f64 = e[offset..].iter().map(|r| r * r).sum();
    let model = ArimaModel {
        order,
        c,
        phi: phi.to_vec(),
        theta: theta.to_vec(),
        sigma2: sse / (w.len() - offset) as f64,
        offset,
    };
    Ok(ArimaFit {
        model,
        residuals: e,
        css: res.f,
        trace: res.trace,
        converged: res.converged,
        iterations: res.iterations,
    })
}

/// One-step forecast of the differenced series after `history`.
pub fn forecast_differenced(model: &ArimaModel, history: &[f64]) -> Result<f64> {
    let ArimaOrder { p, d, .. } = model.order;
    if history.len() < p + d {
        return Err(Error::Range(format!(
            "ARIMA{} forecast needs {} observations, got {}",
            model.order,
            p + d,
            history.len()
        )));
    }
    let w = difference(history, d);
    let e = residuals(
        &w,
        model.offset.min(w.len()),
        model.c,
        &model.phi,
        &model.theta,
    );
    Ok(predict_at(
        &w,
        &e,
        w.len(),
        model.c,
        &model.phi,
        &model.theta,
    ))
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Next value of the series, clamped at zero.
pub fn arima_forecast(model: &ArimaModel, history: &[f64]) -> Result<f64> {
    let w_hat = forecast_differenced(model, history)?;
    let d = model.order.d;
    let n = history.len();
    let level: f64 = (1..=d)
        .map(|k| {
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            sign * binomial(d, k) * history[n - k]
        })
        .sum();
    Ok((level + w_hat).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionRow {
    pub order: ArimaOrder,
    pub aic: f64,
    pub bic: f64,
    pub converged: bool,
}

/// Picks the order with the smallest AIC; ties go to fewer parameters, then
/// smaller BIC. All candidates condition on the same offset (largest `p`) so
/// their likelihoods cover the same observations.
pub fn select_order(
    series: &[f64],
    candidates: &[ArimaOrder],
) -> Result<(ArimaOrder, Vec<CriterionRow>)> {
    if candidates.is_empty() {
        return Err(Error::Selection("empty candidate grid".into()));
    }
    let d0 = candidates[0].d;
    if candidates.iter().any(|c| c.d != d0) {
        return Err(Error::Selection(
            "candidates must share the differencing order".into(),
        ));
    }
    let offset = candidates.iter().map(|c| c.p).max().unwrap_or(0);
    let rows: Vec<CriterionRow> = candidates
        .iter()
        .filter_map(|&order| {
            let fit = arima_fit_with(series, order, offset, SimplexConfig::default()).ok()?;
            Some(CriterionRow {
                order,
                aic: fit.aic(),
                bic: fit.bic(),
                converged: fit.converged,
            })
        })
        .collect();
    let best =
        pick_order(&rows).ok_or_else(|| Error::Selection("every candidate fit failed".into()))?;
    Ok((best, rows))
}

/// Smallest AIC, then fewer parameters, then smaller BIC.
pub fn pick_order(rows: &[CriterionRow]) -> Option<ArimaOrder> {
    rows.iter()
        .filter(|r| !r.aic.is_nan())
        .min_by(|a, b| {
            a.aic
                .total_cmp(&b.aic)
                .then(a.order.n_params().cmp(&b.order.n_params()))
                .then(a.bic.total_cmp(&b.bic))
        })
        .map(|r| r.order)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    PrevCases,
    PrevDelta,
    Arima,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::PrevCases => "prev-cases",
            Method::PrevDelta => "prev-delta",
            Method::Arima => "arima",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArimaBaselineConfig {
    pub order: ArimaOrder,
    /// First day of the fitted series.
    pub fit_start: u32,
    pub simplex: SimplexConfig,
}

impl Default for ArimaBaselineConfig {
    fn default() -> Self {
        ArimaBaselineConfig {
            order: ArimaOrder::default(),
            fit_start: 59,
            simplex: SimplexConfig::default(),
        }
    }
}

fn clamped_deltas(cases: &CaseTable, fips: Fips, from: u32, through: u32) -> Result<Vec<f64>> {
    (from..=through)
        .map(|t| Ok(cases.delta_cases(fips, t)?.max(0) as f64))
        .collect()
}

/// Fits one model per county on new cases from `fit_start` through the first
/// origin, then forecasts every origin in `days` with that model.
pub fn arima_baseline(
    cases: &CaseTable,
    days: DayRange,
    cfg: ArimaBaselineConfig,
    exec: Execution,
) -> Result<(Vec<Prediction>, Warnings)> {
    if days.is_empty() || days.start < cfg.fit_start {
        return Err(Error::Config(format!(
            "origins {}..{} must be non-empty and start after day {}",
            days.start, days.end, cfg.fit_start
        )));
    }
    let counties: Vec<Fips> = cases.counties.keys().copied().collect();
    let per_county = exec.try_map(
        &counties,
        |&fips| -> Result<(Vec<Prediction>, Option<String>)> {
            let series = clamped_deltas(cases, fips, cfg.fit_start, days.end - 1)?;
            let fit_len = (days.start - cfg.fit_start + 1) as usize;
            let fit = arima_fit_with(&series[..fit_len], cfg.order, cfg.order.p, cfg.simplex)?;
            let warning =
                (!fit.converged).then(|| format!("ARIMA fit for {fips} did not converge"));
            let preds = days
                .days()
                .map(|t| {
                    let history = &series[..(t - cfg.fit_start + 1) as usize];
                    let delta = arima_forecast(&fit.model, history)?;
                    Ok(Prediction::from_delta(
                        fips,
                        t,
                        cases.cum_cases(fips, t)?,
                        delta,
                    ))
                })
                .collect::<Result<_>>()?;
            Ok((preds, warning))
        },
    )?;
    let mut warnings = Vec::new();
    let mut out = Vec::new();
    for (p, w) in per_county {
        out.extend(p);
        warnings.extend(w);
    }
    Ok((out, warnings))
}

/// Predictions of `method` for every county and origin day.
pub fn run_baseline(
    method: Method,
    cases: &CaseTable,
    days: DayRange,
    arima: ArimaBaselineConfig,
    exec: Execution,
) -> Result<(Vec<Prediction>, Warnings)> {
    match method {
        Method::Arima => arima_baseline(cases, days, arima, exec),
        Method::PrevCases | Method::PrevDelta => {
            let origins: Vec<u32> = days.days().collect();
            let f = if method == Method::PrevCases {
                prev_cases
            } else {
                prev_delta
            };
            let per_day = exec.try_map(&origins, |&t| f(cases, t))?;
            Ok((per_day.into_iter().flatten().collect(), Vec::new()))
        }
    }
}
