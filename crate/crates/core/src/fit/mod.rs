//! Penalized Poisson fitting of piecewise exponential additive models.
//!
//! A [`ModelSpec`] is resolved against a PED dataset into a [`Design`];
//! coefficients are estimated by PIRLS for given smoothing parameters, and
//! the smoothing parameters are chosen by maximizing a Laplace-approximate
//! restricted likelihood.

mod design;
mod pirls;
mod predict;
mod reml;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BasisError, TermKind};
use crate::ped::{CutPoints, PedDataset, PedError, Schema, TimeConvention};

pub use design::{
    build_design, check_penalized_rank, check_rank, model_matrix, resolve_layout, Design,
    FactorSource, Penalty, PenaltyBlock, PredictorData, SparseRows, TermInfo, TermLayout,
};
pub use pirls::{
    initial_beta, penalized_loglik, pirls, pirls_from, poisson_loglik, score, weighted_gram,
    PirlsFit, MAX_HALVINGS, MAX_ITERATIONS,
};
pub use predict::{two_sided_p, CoefficientRow, CurvePoint, SurvivalCurve};
pub use reml::{
    optimize_smoothing, reml_criterion, reml_parts, OptimizerOptions, RemlParts, SmoothingSelection,
};

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Ped(#[from] PedError),
    #[error("unknown variable {0:?}")]
    UnknownVariable(String),
    #[error("unknown level {0:?}")]
    UnknownLevel(String),
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("model time convention differs from the PED time convention")]
    ConventionMismatch,
    #[error("design matrix is rank deficient (singular value ratio {ratio:.3e})")]
    RankDeficient { ratio: f64 },
    #[error("expected {expected} smoothing parameters, got {found}")]
    LambdaCount { expected: usize, found: usize },
    #[error("PIRLS did not converge within {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("step halving exhausted without decreasing the penalized deviance")]
    StepHalving,
    #[error("penalized information matrix is numerically singular")]
    Singular,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("smoothing parameter search failed from every start")]
    AllStartsFailed,
    #[error("time {0} lies outside the follow-up (0, κ_J]")]
    TimeOutOfRange(f64),
    #[error("model JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotPlacement {
    #[default]
    Quantile,
    Equidistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnotSpec {
    pub n_interior: usize,
    pub degree: usize,
    pub placement: KnotPlacement,
    /// Defaults to `[0, κ_J]`.
    pub boundary: Option<(f64, f64)>,
}

impl Default for KnotSpec {
    fn default() -> Self {
        Self {
            n_interior: 9,
            degree: 3,
            placement: KnotPlacement::Quantile,
            boundary: None,
        }
    }
}

fn first_order() -> usize {
    1
}

/// One additive predictor term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum TermSpec {
    Intercept,
    Linear {
        covariate: String,
    },
    /// Treatment-coded factor; the reference defaults to the first level.
    Factor {
        variable: String,
        #[serde(default)]
        reference: Option<String>,
    },
    /// Centered log-baseline smooth of time.
    Smooth {
        #[serde(default)]
        knots: KnotSpec,
        #[serde(default = "first_order")]
        diff_order: usize,
    },
    /// Shared time-varying coefficient `f(t) · by`.
    VaryingCoefficient {
        by: String,
        #[serde(default)]
        knots: KnotSpec,
        #[serde(default = "first_order")]
        diff_order: usize,
        #[serde(default)]
        centered: bool,
    },
    /// Ridge-penalized group effects, optionally as random slopes of `by`.
    RandomEffect {
        #[serde(default)]
        by: Option<String>,
    },
    /// Functional random effect `f_g(t)`, times `by` when given.
    Fre {
        #[serde(default)]
        by: Option<String>,
        #[serde(default)]
        knots: KnotSpec,
        #[serde(default = "first_order")]
        diff_order: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub terms: Vec<TermSpec>,
    #[serde(default)]
    pub t_convention: TimeConvention,
}

impl ModelSpec {
    pub fn new(terms: Vec<TermSpec>) -> Self {
        Self {
            terms,
            t_convention: TimeConvention::End,
        }
    }

    pub fn validate(&self) -> Result<(), FitError> {
        let count = |f: fn(&TermSpec) -> bool| self.terms.iter().filter(|t| f(t)).count();
        if count(|t| matches!(t, TermSpec::Intercept)) != 1 {
            return Err(FitError::InvalidSpec(
                "exactly one intercept is required".into(),
            ));
        }
        if count(|t| matches!(t, TermSpec::Smooth { .. })) > 1 {
            return Err(FitError::InvalidSpec(
                "at most one baseline smooth is allowed".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub pirls_iterations: usize,
    pub reml_evaluations: usize,
    pub gradient_max: f64,
    pub simplex_diameter: f64,
    pub converged: bool,
}

/// A fitted model; immutable and self-contained for prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub layout: Vec<TermLayout>,
    pub terms: Vec<TermInfo>,
    pub beta: DVector<f64>,
    pub lambdas: Vec<f64>,
    pub penalty_labels: Vec<String>,
    /// `(XᵀWX + S_λ)⁻¹` at convergence.
    pub covariance: DMatrix<f64>,
    pub edf_total: f64,
    pub edf_per_term: Vec<(String, f64)>,
    pub loglik: f64,
    pub reml: f64,
    pub diagnostics: Diagnostics,
    pub cuts: CutPoints,
    pub schema: Schema,
}

/// Fits `spec` on `ped`, choosing smoothing parameters by REML.
pub fn fit(ped: &PedDataset, spec: &ModelSpec) -> Result<FittedModel, FitError> {
    fit_with_options(ped, spec, &OptimizerOptions::default())
}

pub fn fit_with_options(
    ped: &PedDataset,
    spec: &ModelSpec,
    opts: &OptimizerOptions,
) -> Result<FittedModel, FitError> {
    let design = build_design(ped, spec)?;
    let sel = optimize_smoothing(&design, opts)?;
    finish(
        ped,
        spec,
        design,
        &sel.lambdas,
        sel.evaluations,
        sel.simplex_diameter,
    )
}

/// Fits with fixed smoothing parameters.
pub fn fit_fixed(
    ped: &PedDataset,
    spec: &ModelSpec,
    lambdas: &[f64],
) -> Result<FittedModel, FitError> {
    let design = build_design(ped, spec)?;
    finish(ped, spec, design, lambdas, 1, 0.0)
}

fn finish(
    ped: &PedDataset,
    spec: &ModelSpec,
    design: Design,
    lambdas: &[f64],
    evaluations: usize,
    simplex_diameter: f64,
) -> Result<FittedModel, FitError> {
    let fit = pirls(&design, lambdas)?;
    let reml = reml_parts(&design, lambdas, &fit)?.value();
    let covariance = fit.chol.inverse();
    let (edf_total, edf_per_term) = edf(&design, lambdas, &covariance);
    Ok(FittedModel {
        spec: spec.clone(),
        penalty_labels: design.penalties.iter().map(|p| p.label.clone()).collect(),
        terms: design.terms.clone(),
        layout: design.layout,
        loglik: poisson_loglik(&design.response, &fit.mu),
        beta: fit.beta,
        lambdas: lambdas.to_vec(),
        covariance,
        edf_total,
        edf_per_term,
        reml,
        diagnostics: Diagnostics {
            pirls_iterations: fit.iterations,
            reml_evaluations: evaluations,
            gradient_max: fit.gradient_max,
            simplex_diameter,
            converged: true,
        },
        cuts: ped.cuts.clone(),
        schema: ped.schema.clone(),
    })
}

/// Trace of `F = (XᵀWX + S_λ)⁻¹ XᵀWX`, in total and per term block.
///
/// Uses the identity `F = I − V S_λ`, which is exact for unpenalized columns
/// and stays accurate when `XᵀWX` alone is ill-conditioned.
pub fn edf(
    design: &Design,
    lambdas: &[f64],
    covariance: &DMatrix<f64>,
) -> (f64, Vec<(String, f64)>) {
    let vs = covariance * design.s_lambda(lambdas);
    let per_term: Vec<(String, f64)> = design
        .terms
        .iter()
        .map(|t| {
            (
                t.label.clone(),
                t.columns.clone().map(|i| 1.0 - vs[(i, i)]).sum(),
            )
        })
        .collect();
    (per_term.iter().map(|(_, e)| e).sum(), per_term)
}

impl FittedModel {
    pub fn to_json(&self) -> Result<String, FitError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, FitError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn term_edf(&self, label: &str) -> Option<f64> {
        self.edf_per_term
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, e)| *e)
    }

    /// Indices of terms carrying penalties.
    pub fn penalized_terms(&self) -> impl Iterator<Item = usize> + '_ {
        self.terms.iter().enumerate().filter_map(|(i, t)| {
            matches!(
                t.kind,
                TermKind::Smooth
                    | TermKind::VaryingCoefficient
                    | TermKind::RandomEffect
                    | TermKind::Fre
            )
            .then_some(i)
        })
    }
}
