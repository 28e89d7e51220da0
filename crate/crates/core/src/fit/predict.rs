//! Hazard, cumulative hazard and survival prediction; Wald tables and
//! smooth-curve evaluation.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::design::{model_matrix, PredictorData, TermLayout};
use super::{FitError, FittedModel};
use crate::basis::TermKind;
use crate::ped::{SurvivalRecord, TimeConvention};

/// Piecewise-constant hazard of one subject over the model's cut points.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalCurve {
    kappas: Vec<f64>,
    hazards: Vec<f64>,
    /// `Λ(κ_j)`, `j = 0..=J`.
    cumulative: Vec<f64>,
}

impl SurvivalCurve {
    pub fn new(kappas: Vec<f64>, hazards: Vec<f64>) -> Self {
        assert_eq!(kappas.len(), hazards.len() + 1);
        let mut cumulative = Vec::with_capacity(kappas.len());
        cumulative.push(0.0);
        for (j, h) in hazards.iter().enumerate() {
            let prev = cumulative[j];
            cumulative.push(prev + h * (kappas[j + 1] - kappas[j]));
        }
        Self {
            kappas,
            hazards,
            cumulative,
        }
    }

    fn interval(&self, t: f64) -> Option<usize> {
        if !(t > 0.0) || t > *self.kappas.last()? {
            return None;
        }
        Some(self.kappas.partition_point(|&k| k < t))
    }

    pub fn hazard(&self, t: f64) -> Option<f64> {
        self.interval(t).map(|j| self.hazards[j - 1])
    }

    /// `Λ(t)`; zero at `t = 0`, `None` beyond the last cut point.
    pub fn cumulative_hazard(&self, t: f64) -> Option<f64> {
        if t == 0.0 {
            return Some(0.0);
        }
        let j = self.interval(t)?;
        Some(self.cumulative[j - 1] + self.hazards[j - 1] * (t - self.kappas[j - 1]))
    }

    pub fn survival(&self, t: f64) -> Option<f64> {
        self.cumulative_hazard(t).map(|c| (-c).exp())
    }

    pub fn hazards(&self) -> &[f64] {
        &self.hazards
    }
}

/// Wald summary of one unpenalized coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub term: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Pointwise estimate of a smooth term with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub group: String,
    pub t: f64,
    pub estimate: f64,
    pub se: f64,
}

/// Two-sided normal p-value `2 Φ(−|z|)`.
pub fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

const CHUNK_SUBJECTS: usize = 256;

impl FittedModel {
    pub fn convention(&self) -> TimeConvention {
        self.spec.t_convention
    }

    /// Linear predictor `η` (without offset) at each row of `data`.
    pub fn linear_predictor(&self, data: &PredictorData) -> Result<DVector<f64>, FitError> {
        let x = model_matrix(&self.layout, data)?;
        Ok(x * &self.beta)
    }

    fn check_subject(&self, covariates: &[f64], group: &str) -> Result<(), FitError> {
        if self.schema.group_index(group).is_none() {
            return Err(FitError::UnknownLevel(group.to_string()));
        }
        if covariates.len() != self.schema.covariates.len() {
            return Err(FitError::InvalidSpec(format!(
                "expected {} covariates, got {}",
                self.schema.covariates.len(),
                covariates.len()
            )));
        }
        Ok(())
    }

    /// Hazard curves for a batch of subjects (only covariates and group are
    /// used).
    pub fn survival_curves(
        &self,
        subjects: &[SurvivalRecord],
    ) -> Result<Vec<SurvivalCurve>, FitError> {
        let kappas = self.cuts.kappas().to_vec();
        let j = self.cuts.n_intervals();
        let t_rep: Vec<f64> = (1..=j)
            .map(|i| self.cuts.t_rep(i, self.convention()))
            .collect();
        let k = self.schema.covariates.len();
        let mut out = Vec::with_capacity(subjects.len());
        for chunk in subjects.chunks(CHUNK_SUBJECTS) {
            let mut data = PredictorData {
                t: Vec::with_capacity(chunk.len() * j),
                covariates: vec![Vec::with_capacity(chunk.len() * j); k],
                groups: Vec::with_capacity(chunk.len() * j),
            };
            for s in chunk {
                self.check_subject(&s.covariates, &s.group)?;
                data.t.extend_from_slice(&t_rep);
                for (c, col) in data.covariates.iter_mut().enumerate() {
                    col.extend(std::iter::repeat_n(s.covariates[c], j));
                }
                data.groups.extend(std::iter::repeat_n(s.group.clone(), j));
            }
            let eta = self.linear_predictor(&data)?;
            for (i, _) in chunk.iter().enumerate() {
                let hazards = eta.rows(i * j, j).iter().map(|e| e.exp()).collect();
                out.push(SurvivalCurve::new(kappas.clone(), hazards));
            }
        }
        Ok(out)
    }

    pub fn survival_curve(
        &self,
        covariates: &[f64],
        group: &str,
    ) -> Result<SurvivalCurve, FitError> {
        let rec = SurvivalRecord {
            id: String::new(),
            time: 1.0,
            event: false,
            covariates: covariates.to_vec(),
            group: group.to_string(),
        };
        Ok(self.survival_curves(std::slice::from_ref(&rec))?.remove(0))
    }

    fn check_time(&self, t: f64) -> Result<(), FitError> {
        if !(t > 0.0 && t <= self.cuts.last()) {
            return Err(FitError::TimeOutOfRange(t));
        }
        Ok(())
    }

    pub fn predict_hazard(&self, covariates: &[f64], group: &str, t: f64) -> Result<f64, FitError> {
        self.check_time(t)?;
        let j = self
            .cuts
            .interval_of(t)
            .ok_or(FitError::TimeOutOfRange(t))?;
        let data = PredictorData {
            t: vec![self.cuts.t_rep(j, self.convention())],
            covariates: covariates.iter().map(|&c| vec![c]).collect(),
            groups: vec![group.to_string()],
        };
        self.check_subject(covariates, group)?;
        Ok(self.linear_predictor(&data)?[0].exp())
    }

    pub fn cumulative_hazard(
        &self,
        covariates: &[f64],
        group: &str,
        t: f64,
    ) -> Result<f64, FitError> {
        self.check_time(t)?;
        let curve = self.survival_curve(covariates, group)?;
        curve
            .cumulative_hazard(t)
            .ok_or(FitError::TimeOutOfRange(t))
    }

    pub fn survival_prob(&self, covariates: &[f64], group: &str, t: f64) -> Result<f64, FitError> {
        Ok((-self.cumulative_hazard(covariates, group, t)?).exp())
    }

    /// Wald tests for intercept, linear and factor coefficients.
    pub fn coefficient_table(&self) -> Vec<CoefficientRow> {
        let mut rows = Vec::new();
        for term in &self.terms {
            if !matches!(
                term.kind,
                TermKind::Intercept | TermKind::Linear | TermKind::Factor
            ) {
                continue;
            }
            for (col, label) in term.columns.clone().zip(&term.column_labels) {
                let estimate = self.beta[col];
                let se = self.covariance[(col, col)].sqrt();
                let z = estimate / se;
                rows.push(CoefficientRow {
                    term: label.clone(),
                    estimate,
                    se,
                    z,
                    p_value: two_sided_p(z),
                });
            }
        }
        rows
    }

    /// Evaluates term `term` per unit of its `by` covariate at each `t` for
    /// each `group`, with pointwise standard errors from the covariance.
    pub fn term_curve(
        &self,
        term: usize,
        groups: &[String],
        grid: &[f64],
    ) -> Result<Vec<CurvePoint>, FitError> {
        let info = &self.terms[term];
        let layout = &self.layout[term];
        let k = self.schema.covariates.len();
        let n = groups.len() * grid.len();
        let data = PredictorData {
            t: groups.iter().flat_map(|_| grid.iter().copied()).collect(),
            covariates: vec![vec![1.0; n]; k],
            groups: groups
                .iter()
                .flat_map(|g| std::iter::repeat_n(g.clone(), grid.len()))
                .collect(),
        };
        let block = layout.block(&data)?;
        let cols = info.columns.clone();
        let beta = self.beta.rows(cols.start, cols.len());
        let v = self
            .covariance
            .view((cols.start, cols.start), (cols.len(), cols.len()));
        let est = &block * beta;
        let bv = &block * v;
        Ok((0..n)
            .map(|r| {
                let var = bv.row(r).dot(&block.row(r));
                CurvePoint {
                    group: data.groups[r].clone(),
                    t: data.t[r],
                    estimate: est[r],
                    se: var.max(0.0).sqrt(),
                }
            })
            .collect())
    }

    /// Index of the first term of the given kind.
    pub fn find_term(&self, kind: TermKind) -> Option<usize> {
        self.terms.iter().position(|t| t.kind == kind)
    }

    /// Boundary knots of a spline-based term.
    pub fn term_range(&self, term: usize) -> Option<(f64, f64)> {
        match &self.layout[term] {
            TermLayout::Smooth { knots, .. }
            | TermLayout::VaryingCoefficient { knots, .. }
            | TermLayout::Fre { knots, .. } => Some(knots.boundary),
            _ => None,
        }
    }
}
