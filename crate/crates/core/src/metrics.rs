//! Fit and prediction-accuracy measures: Poisson log-likelihood, EDF-based
//! AIC, Kaplan–Meier curves and the IPCW Brier score with its time integral.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::{FitError, FittedModel, PredictorData, SurvivalCurve};
use crate::fmt::g17;
use crate::ped::{PedDataset, SurvivalData};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no observations")]
    Empty,
    #[error("times and event flags differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("times must be positive and finite")]
    BadTime,
    #[error("PED schema does not match the model schema")]
    SchemaMismatch,
    #[error("evaluation time {t} lies outside [0, {max}]")]
    OutOfRange { t: f64, max: f64 },
    #[error("integration grid needs at least two points")]
    Grid,
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Poisson log-likelihood of the model on PED rows, `Σ δ log μ − μ` with
/// `μ = exp(η + o)`.
pub fn model_loglik(model: &FittedModel, ped: &PedDataset) -> Result<f64, MetricsError> {
    if ped.schema.covariates != model.schema.covariates {
        return Err(MetricsError::SchemaMismatch);
    }
    let eta = model.linear_predictor(&PredictorData::from_ped(ped))?;
    Ok(ped
        .rows
        .iter()
        .zip(eta.iter())
        .map(|(r, &e)| {
            let log_mu = e + r.offset;
            f64::from(r.delta) * log_mu - log_mu.exp()
        })
        .sum())
}

/// `Σ δ_ij o_ij`: the part of the Poisson log-likelihood that does not depend
/// on the coefficients. Subtracting it gives the survival log-likelihood.
pub fn offset_constant(ped: &PedDataset) -> f64 {
    ped.rows
        .iter()
        .filter(|r| r.delta == 1)
        .map(|r| r.offset)
        .sum()
}

/// Survival log-likelihood `Σ_i δ_i log λ(t_i) − Λ(t_i)` of piecewise
/// constant hazards, one curve per subject.
pub fn survival_loglik(curves: &[SurvivalCurve], data: &SurvivalData) -> Result<f64, MetricsError> {
    let mut ll = 0.0;
    for (c, r) in curves.iter().zip(&data.records) {
        let cum = c.cumulative_hazard(r.time).ok_or(MetricsError::BadTime)?;
        if r.event {
            ll += c.hazard(r.time).ok_or(MetricsError::BadTime)?.ln();
        }
        ll -= cum;
    }
    Ok(ll)
}

pub fn aic(model: &FittedModel) -> f64 {
    aic_from(model.loglik, model.edf_total)
}

pub fn aic_from(loglik: f64, edf: f64) -> f64 {
    -2.0 * loglik + 2.0 * edf
}

/// Right-continuous step function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub initial: f64,
}

impl StepFunction {
    /// Value at `t` (after any jump at `t`).
    pub fn eval(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => self.initial,
            i => self.values[i - 1],
        }
    }

    /// Left limit at `t` (before any jump at `t`).
    pub fn left_limit(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s < t) {
            0 => self.initial,
            i => self.values[i - 1],
        }
    }
}

/// Product-limit estimator `Ŝ(t) = Π_{t_(i) ≤ t} (1 − d_i / n_i)`.
///
/// Only times with at least one event create a jump.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<StepFunction, MetricsError> {
    if times.is_empty() {
        return Err(MetricsError::Empty);
    }
    if times.len() != events.len() {
        return Err(MetricsError::LengthMismatch(times.len(), events.len()));
    }
    if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(MetricsError::BadTime);
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk = times.len();
    let mut surv = 1.0;
    let mut out = StepFunction {
        times: vec![],
        values: vec![],
        initial: 1.0,
    };
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut deaths = 0;
        let mut tied = 0;
        while i < order.len() && times[order[i]] == t {
            deaths += usize::from(events[order[i]]);
            tied += 1;
            i += 1;
        }
        if deaths > 0 {
            surv *= 1.0 - deaths as f64 / at_risk as f64;
            out.times.push(t);
            out.values.push(surv);
        }
        at_risk -= tied;
    }
    Ok(out)
}

/// Kaplan–Meier estimate of the censoring survivor function `Ĝ`.
pub fn censoring_km(times: &[f64], events: &[bool]) -> Result<StepFunction, MetricsError> {
    let flipped: Vec<bool> = events.iter().map(|e| !e).collect();
    kaplan_meier(times, &flipped)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrierPoint {
    pub t: f64,
    pub score: f64,
    /// Subjects skipped because their censoring weight was zero.
    pub dropped: usize,
}

/// IPCW Brier score at `t` given each subject's predicted `Ŝ(t | x_i)`.
pub fn brier_from_predictions(
    surv_at_t: &[f64],
    times: &[f64],
    events: &[bool],
    t: f64,
    g_hat: &StepFunction,
) -> BrierPoint {
    let n = times.len();
    let g_t = g_hat.eval(t);
    let mut sum = 0.0;
    let mut dropped = 0;
    for i in 0..n {
        let s = surv_at_t[i];
        if times[i] <= t && events[i] {
            let g = g_hat.left_limit(times[i]);
            if g > 0.0 {
                sum += s * s / g;
            } else {
                dropped += 1;
            }
        } else if times[i] > t {
            if g_t > 0.0 {
                sum += (1.0 - s) * (1.0 - s) / g_t;
            } else {
                dropped += 1;
            }
        }
    }
    BrierPoint {
        t,
        score: sum / n as f64,
        dropped,
    }
}

fn curve_survival(curves: &[SurvivalCurve], t: f64) -> Result<Vec<f64>, MetricsError> {
    curves
        .iter()
        .map(|c| {
            c.survival(t)
                .ok_or(MetricsError::OutOfRange { t, max: f64::NAN })
        })
        .collect()
}

pub fn brier_score(
    model: &FittedModel,
    data: &SurvivalData,
    t: f64,
    g_hat: &StepFunction,
) -> Result<BrierPoint, MetricsError> {
    let curves = model.survival_curves(&data.records)?;
    let surv = curve_survival(&curves, t)?;
    Ok(brier_from_predictions(
        &surv,
        &data.times(),
        &data.events(),
        t,
        g_hat,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IbsResult {
    pub ibs: f64,
    pub tau: f64,
    pub curve: Vec<BrierPoint>,
    pub dropped: usize,
}

/// Largest observed event time, the default integration limit.
pub fn default_tau(data: &SurvivalData) -> Option<f64> {
    data.records
        .iter()
        .filter(|r| r.event)
        .map(|r| r.time)
        .reduce(f64::max)
}

/// `(1/τ) ∫₀^τ BS(t) dt` by the trapezoid rule on `grid_size` equidistant
/// points, from precomputed per-subject curves.
pub fn ibs_from_curves(
    curves: &[SurvivalCurve],
    times: &[f64],
    events: &[bool],
    tau: f64,
    grid_size: usize,
) -> Result<IbsResult, MetricsError> {
    if grid_size < 2 {
        return Err(MetricsError::Grid);
    }
    if times.is_empty() {
        return Err(MetricsError::Empty);
    }
    let g_hat = censoring_km(times, events)?;
    let h = tau / (grid_size - 1) as f64;
    let mut curve = Vec::with_capacity(grid_size);
    for k in 0..grid_size {
        let t = if k + 1 == grid_size {
            tau
        } else {
            k as f64 * h
        };
        let surv = curve_survival(curves, t)?;
        curve.push(brier_from_predictions(&surv, times, events, t, &g_hat));
    }
    let integral: f64 = curve
        .windows(2)
        .map(|w| 0.5 * (w[0].score + w[1].score) * (w[1].t - w[0].t))
        .sum();
    let dropped = curve.iter().map(|b| b.dropped).sum();
    Ok(IbsResult {
        ibs: integral / tau,
        tau,
        curve,
        dropped,
    })
}

pub fn ibs(
    model: &FittedModel,
    data: &SurvivalData,
    tau: f64,
    grid_size: usize,
) -> Result<IbsResult, MetricsError> {
    let max = model.cuts.last();
    if !(tau > 0.0 && tau <= max) {
        return Err(MetricsError::OutOfRange { t: tau, max });
    }
    let curves = model.survival_curves(&data.records)?;
    ibs_from_curves(&curves, &data.times(), &data.events(), tau, grid_size)
}

/// Summary of one model on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub loglik: f64,
    pub edf: f64,
    pub aic: f64,
    pub ibs: f64,
    pub brier: Vec<(f64, f64)>,
}

pub const DEFAULT_GRID: usize = 200;

/// Log-likelihood on `ped`, the model's EDF and AIC, and the IBS on the
/// subjects recovered from `ped`.
pub fn fit_report(
    model: &FittedModel,
    ped: &PedDataset,
    tau: Option<f64>,
    grid_size: usize,
) -> Result<FitReport, MetricsError> {
    let loglik = model_loglik(model, ped)?;
    let data = ped.subject_data();
    let tau = tau
        .or_else(|| default_tau(&data))
        .ok_or(MetricsError::Empty)?;
    let res = ibs(model, &data, tau, grid_size)?;
    Ok(FitReport {
        loglik,
        edf: model.edf_total,
        aic: aic_from(loglik, model.edf_total),
        ibs: res.ibs,
        brier: res.curve.iter().map(|b| (b.t, b.score)).collect(),
    })
}

/// Writes reports as `label,loglik,edf,aic,ibs` rows.
pub fn write_reports<W: Write>(
    writer: W,
    reports: &[(String, FitReport)],
) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["label", "loglik", "edf", "aic", "ibs"])?;
    for (label, r) in reports {
        w.write_record([
            label.clone(),
            g17(r.loglik),
            g17(r.edf),
            g17(r.aic),
            g17(r.ibs),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn km_all_events() {
        let s = kaplan_meier(&[1.0, 2.0, 3.0], &[true, true, true]).unwrap();
        assert_eq!(s.times, vec![1.0, 2.0, 3.0]);
        let want = [2.0 / 3.0, 1.0 / 3.0, 0.0];
        for (v, w) in s.values.iter().zip(want) {
            assert!((v - w).abs() < 1e-15);
        }
        assert_eq!(s.eval(0.5), 1.0);
        assert_eq!(s.left_limit(1.0), 1.0);
        assert!((s.eval(1.0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn km_no_events_is_flat() {
        let s = kaplan_meier(&[1.0, 2.0], &[false, false]).unwrap();
        assert!(s.times.is_empty());
        assert_eq!(s.eval(10.0), 1.0);
    }

    #[test]
    fn km_censoring_no_jump() {
        let s = kaplan_meier(&[1.0, 2.0], &[true, false]).unwrap();
        assert_eq!(s.times, vec![1.0]);
        assert_eq!(s.eval(1.0), 0.5);
        assert_eq!(s.eval(2.5), 0.5);
    }

    #[test]
    fn km_ties() {
        let s = kaplan_meier(&[2.0, 2.0, 2.0, 5.0], &[true, true, false, true]).unwrap();
        assert_eq!(s.times, vec![2.0, 5.0]);
        assert_eq!(s.values, vec![0.5, 0.0]);
        assert!(matches!(kaplan_meier(&[], &[]), Err(MetricsError::Empty)));
    }

    #[test]
    fn aic_arithmetic() {
        assert_eq!(aic_from(-100.0, 5.0), 210.0);
    }

    #[test]
    fn brier_perfect_and_coin_flip() {
        let times = [1.0, 2.0, 3.0, 4.0];
        let events = [true; 4];
        let g = censoring_km(&times, &events).unwrap();
        let t = 2.5;
        let perfect: Vec<f64> = times
            .iter()
            .map(|&ti| if ti > t { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(
            brier_from_predictions(&perfect, &times, &events, t, &g).score,
            0.0
        );
        let half = [0.5; 4];
        for t in [0.5, 1.0, 2.5, 4.0] {
            assert_eq!(
                brier_from_predictions(&half, &times, &events, t, &g).score,
                0.25
            );
        }
    }

    #[test]
    fn brier_zero_weight_dropped() {
        let times = [1.0, 2.0, 3.0];
        let events = [true, false, true];
        let g = censoring_km(&times, &events).unwrap();
        assert_eq!(g.eval(2.0), 0.5);
        let p = brier_from_predictions(&[0.5; 3], &times, &events, 2.5, &g);
        assert_eq!(p.dropped, 0);
        let g = StepFunction {
            times: vec![2.0],
            values: vec![0.0],
            initial: 1.0,
        };
        let p = brier_from_predictions(&[0.5; 3], &times, &events, 2.5, &g);
        assert_eq!(p.dropped, 1);
        assert_eq!(p.score, 0.25 / 3.0);
    }

    #[test]
    fn ibs_constant_half() {
        let times = [1.0, 2.0, 3.0, 4.0];
        let events = [true; 4];
        let kappas = vec![0.0, 4.0];
        // hazard with S(t) = 0.5 everywhere is not expressible; use predictions directly
        let g = censoring_km(&times, &events).unwrap();
        let mut total = 0.0;
        let grid = 11;
        let mut prev: Option<(f64, f64)> = None;
        for k in 0..grid {
            let t = 4.0 * k as f64 / (grid - 1) as f64;
            let b = brier_from_predictions(&[0.5; 4], &times, &events, t, &g).score;
            if let Some((pt, pb)) = prev {
                total += 0.5 * (pb + b) * (t - pt);
            }
            prev = Some((t, b));
        }
        assert!((total / 4.0 - 0.25).abs() < 1e-15);
        let curves = vec![SurvivalCurve::new(kappas, vec![0.3]); 4];
        let r = ibs_from_curves(&curves, &times, &events, 4.0, 50).unwrap();
        assert!(r.ibs >= 0.0 && r.ibs <= 1.0);
    }
}
