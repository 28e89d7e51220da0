//! Assembly of the design matrix and embedded penalties from a [`ModelSpec`].

use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{FitError, KnotPlacement, KnotSpec, ModelSpec, TermSpec};
use crate::basis::{
    self, fre_term, random_effect_term, spline_term, Centering, KnotVector, PenaltyMatrix,
    TermBasis, TermKind,
};
use crate::fmt::g17;
use crate::ped::{PedDataset, Schema};

/// Where a factor term takes its levels from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorSource {
    Group,
    Covariate(usize),
}

/// Everything needed to re-evaluate a term's design columns on new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TermLayout {
    Intercept,
    Linear {
        covariate: usize,
    },
    Factor {
        source: FactorSource,
        levels: Vec<String>,
        reference: usize,
    },
    Smooth {
        knots: KnotVector,
        diff_order: usize,
        means: Vec<f64>,
    },
    VaryingCoefficient {
        by: usize,
        knots: KnotVector,
        diff_order: usize,
        means: Option<Vec<f64>>,
    },
    RandomEffect {
        levels: Vec<String>,
        by: Option<usize>,
    },
    Fre {
        levels: Vec<String>,
        by: Option<usize>,
        knots: KnotVector,
        diff_order: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermInfo {
    pub label: String,
    pub kind: TermKind,
    pub columns: Range<usize>,
    pub column_labels: Vec<String>,
}

/// A term penalty embedded at the term's column range.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    pub term: usize,
    pub label: String,
    pub columns: Range<usize>,
    pub matrix: PenaltyMatrix,
}

/// Penalties of one term, with the structural rank of their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyBlock {
    pub columns: Range<usize>,
    pub penalties: Vec<usize>,
    pub rank: usize,
}

/// Columnar predictor values: time, covariates (one vector per schema
/// covariate) and group labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorData {
    pub t: Vec<f64>,
    pub covariates: Vec<Vec<f64>>,
    pub groups: Vec<String>,
}

impl PredictorData {
    pub fn from_ped(ped: &PedDataset) -> Self {
        let k = ped.schema.covariates.len();
        Self {
            t: ped.rows.iter().map(|r| r.t_rep).collect(),
            covariates: (0..k)
                .map(|c| ped.rows.iter().map(|r| r.covariates[c]).collect())
                .collect(),
            groups: ped.rows.iter().map(|r| r.group.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Row-compressed copy of a design matrix; products skip structural zeros
/// (local B-spline support, one active group per row).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    starts: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    ncols: usize,
}

impl SparseRows {
    pub fn from_dense(x: &DMatrix<f64>) -> Self {
        let mut starts = Vec::with_capacity(x.nrows() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        starts.push(0);
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                let v = x[(r, c)];
                if v != 0.0 {
                    cols.push(c);
                    vals.push(v);
                }
            }
            starts.push(cols.len());
        }
        Self {
            starts,
            cols,
            vals,
            ncols: x.ncols(),
        }
    }

    pub fn density(&self) -> f64 {
        let cells = (self.starts.len() - 1) * self.ncols;
        if cells == 0 {
            1.0
        } else {
            self.vals.len() as f64 / cells as f64
        }
    }

    fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.starts[r], self.starts[r + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    /// `X β`.
    pub fn mul(&self, beta: &DVector<f64>) -> DVector<f64> {
        let n = self.starts.len() - 1;
        DVector::from_iterator(
            n,
            (0..n).map(|r| {
                let (c, v) = self.row(r);
                c.iter().zip(v).map(|(&c, &v)| v * beta[c]).sum::<f64>()
            }),
        )
    }

    /// `Xᵀ v`.
    pub fn tr_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for (r, &vr) in v.iter().enumerate() {
            let (c, x) = self.row(r);
            for (&c, &x) in c.iter().zip(x) {
                out[c] += x * vr;
            }
        }
        out
    }

    /// `Xᵀ diag(w) X`.
    pub fn gram(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let p = self.ncols;
        let mut g = vec![0.0; p * p];
        for (r, &wr) in w.iter().enumerate() {
            let (c, x) = self.row(r);
            for (i, (&ci, &xi)) in c.iter().zip(x).enumerate() {
                let s = wr * xi;
                // upper triangle, column-major (ci, cj) with cj ≥ ci
                for (&cj, &xj) in c[i..].iter().zip(&x[i..]) {
                    g[cj * p + ci] += s * xj;
                }
            }
        }
        for j in 0..p {
            for i in 0..j {
                g[i * p + j] = g[j * p + i];
            }
        }
        DMatrix::from_vec(p, p, g)
    }
}

#[derive(Debug, Clone)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub sparse: SparseRows,
    pub offset: DVector<f64>,
    pub response: DVector<f64>,
    pub penalties: Vec<Penalty>,
    pub blocks: Vec<PenaltyBlock>,
    pub terms: Vec<TermInfo>,
    pub layout: Vec<TermLayout>,
}

impl Design {
    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_lambdas(&self) -> usize {
        self.penalties.len()
    }

    /// Column of the intercept term, if the model has one.
    pub fn intercept_column(&self) -> Option<usize> {
        self.terms
            .iter()
            .find(|t| t.kind == TermKind::Intercept)
            .map(|t| t.columns.start)
    }

    /// `Σ_k λ_k S_k` embedded in the full `p × p` coefficient space.
    pub fn s_lambda(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let p = self.ncols();
        let mut s = DMatrix::zeros(p, p);
        for (pen, &l) in self.penalties.iter().zip(lambdas) {
            let r = &pen.columns;
            let mut view = s.view_mut((r.start, r.start), (r.len(), r.len()));
            view += &pen.matrix.matrix * l;
        }
        s
    }

    /// Penalty `k` embedded in the full coefficient space.
    pub fn embedded_penalty(&self, k: usize) -> DMatrix<f64> {
        let p = self.ncols();
        let pen = &self.penalties[k];
        let mut s = DMatrix::zeros(p, p);
        let r = &pen.columns;
        s.view_mut((r.start, r.start), (r.len(), r.len()))
            .copy_from(&pen.matrix.matrix);
        s
    }

    /// `XᵀWX`, through the row-compressed copy when `X` is sparse enough.
    pub fn weighted_gram(&self, w: &DVector<f64>) -> DMatrix<f64> {
        if self.sparse.density() < 0.5 {
            self.sparse.gram(w)
        } else {
            super::pirls::weighted_gram(&self.x, w)
        }
    }

    pub fn unpenalized_columns(&self) -> usize {
        self.ncols() - self.blocks.iter().map(|b| b.columns.len()).sum::<usize>()
    }
}

pub(crate) fn term_label(spec: &TermSpec, schema: &Schema) -> String {
    let by = |b: &Option<String>| b.as_ref().map(|s| format!(":{s}")).unwrap_or_default();
    match spec {
        TermSpec::Intercept => "intercept".into(),
        TermSpec::Linear { covariate } => covariate.clone(),
        TermSpec::Factor { variable, .. } => format!("factor({variable})"),
        TermSpec::Smooth { .. } => "s(t)".into(),
        TermSpec::VaryingCoefficient { by: b, .. } => format!("s(t):{b}"),
        TermSpec::RandomEffect { by: b } => format!("re({}){}", schema.group_name, by(b)),
        TermSpec::Fre { by: b, .. } => format!("fre({},t){}", schema.group_name, by(b)),
    }
}

fn resolve_covariate(schema: &Schema, name: &str) -> Result<usize, FitError> {
    schema
        .covariate_index(name)
        .ok_or_else(|| FitError::UnknownVariable(name.to_string()))
}

fn make_knots(spec: &KnotSpec, ped: &PedDataset) -> Result<KnotVector, FitError> {
    let boundary = spec.boundary.unwrap_or((0.0, ped.cuts.last()));
    let knots = match spec.placement {
        KnotPlacement::Equidistant => {
            KnotVector::equidistant(spec.degree, spec.n_interior, boundary)?
        }
        KnotPlacement::Quantile => {
            // distinct evaluation points, so no knot span is empty
            let mut times: Vec<f64> = ped.rows.iter().map(|r| r.t_rep).collect();
            times.sort_by(f64::total_cmp);
            times.dedup();
            KnotVector::quantile(spec.degree, spec.n_interior, &times, boundary)
                .or_else(|_| KnotVector::equidistant(spec.degree, spec.n_interior, boundary))?
        }
    };
    Ok(knots)
}

/// Resolves a model specification against a PED schema into term layouts.
pub fn resolve_layout(spec: &ModelSpec, ped: &PedDataset) -> Result<Vec<TermLayout>, FitError> {
    spec.validate()?;
    if spec.t_convention != ped.convention {
        return Err(FitError::ConventionMismatch);
    }
    let schema = &ped.schema;
    let data = PredictorData::from_ped(ped);
    let mut out = Vec::with_capacity(spec.terms.len());
    for term in &spec.terms {
        let layout = match term {
            TermSpec::Intercept => TermLayout::Intercept,
            TermSpec::Linear { covariate } => TermLayout::Linear {
                covariate: resolve_covariate(schema, covariate)?,
            },
            TermSpec::Factor {
                variable,
                reference,
            } => {
                let (source, levels) = if *variable == schema.group_name {
                    (FactorSource::Group, schema.group_levels.clone())
                } else {
                    let c = resolve_covariate(schema, variable)?;
                    let mut v = data.covariates[c].clone();
                    v.sort_by(f64::total_cmp);
                    v.dedup();
                    (FactorSource::Covariate(c), v.into_iter().map(g17).collect())
                };
                let reference = match reference {
                    None => 0,
                    Some(r) => levels
                        .iter()
                        .position(|l| l == r)
                        .ok_or_else(|| FitError::UnknownLevel(r.clone()))?,
                };
                if levels.len() < 2 {
                    return Err(FitError::InvalidSpec(format!(
                        "factor {variable} needs at least two levels"
                    )));
                }
                TermLayout::Factor {
                    source,
                    levels,
                    reference,
                }
            }
            TermSpec::Smooth { knots, diff_order } => {
                let knots = make_knots(knots, ped)?;
                let raw = basis::bspline_basis(&data.t, &knots)?;
                TermLayout::Smooth {
                    means: basis::column_means(&raw),
                    knots,
                    diff_order: *diff_order,
                }
            }
            TermSpec::VaryingCoefficient {
                by,
                knots,
                diff_order,
                centered,
            } => {
                let by = resolve_covariate(schema, by)?;
                let knots = make_knots(knots, ped)?;
                let means = if *centered {
                    Some(basis::column_means(&basis::bspline_basis(&data.t, &knots)?))
                } else {
                    None
                };
                TermLayout::VaryingCoefficient {
                    by,
                    knots,
                    diff_order: *diff_order,
                    means,
                }
            }
            TermSpec::RandomEffect { by } => TermLayout::RandomEffect {
                levels: schema.group_levels.clone(),
                by: by
                    .as_deref()
                    .map(|b| resolve_covariate(schema, b))
                    .transpose()?,
            },
            TermSpec::Fre {
                by,
                knots,
                diff_order,
            } => TermLayout::Fre {
                levels: schema.group_levels.clone(),
                by: by
                    .as_deref()
                    .map(|b| resolve_covariate(schema, b))
                    .transpose()?,
                knots: make_knots(knots, ped)?,
                diff_order: *diff_order,
            },
        };
        out.push(layout);
    }
    Ok(out)
}

impl TermLayout {
    /// Design columns and penalties of this term on `data`.
    pub fn evaluate(&self, data: &PredictorData) -> Result<TermBasis, FitError> {
        let n = data.len();
        let tb = match self {
            TermLayout::Intercept => TermBasis {
                kind: TermKind::Intercept,
                design_block: DMatrix::from_element(n, 1, 1.0),
                penalties: vec![],
                column_labels: vec!["(Intercept)".into()],
                column_means: None,
            },
            TermLayout::Linear { covariate } => TermBasis {
                kind: TermKind::Linear,
                design_block: DMatrix::from_column_slice(n, 1, &data.covariates[*covariate]),
                penalties: vec![],
                column_labels: vec![String::new()],
                column_means: None,
            },
            TermLayout::Factor {
                source,
                levels,
                reference,
            } => {
                let labels: Vec<String> = match source {
                    FactorSource::Group => data.groups.clone(),
                    FactorSource::Covariate(c) => {
                        data.covariates[*c].iter().map(|&v| g17(v)).collect()
                    }
                };
                let full = basis::indicator_basis(&labels, levels).map_err(|e| match e {
                    basis::BasisError::UnknownLevel(l) => FitError::UnknownLevel(l),
                    other => other.into(),
                })?;
                let keep: Vec<usize> = (0..levels.len()).filter(|&i| i != *reference).collect();
                TermBasis {
                    kind: TermKind::Factor,
                    design_block: full.select_columns(&keep),
                    penalties: vec![],
                    column_labels: keep.iter().map(|&i| levels[i].clone()).collect(),
                    column_means: None,
                }
            }
            TermLayout::Smooth {
                knots,
                diff_order,
                means,
            } => spline_term(&data.t, None, knots, *diff_order, Centering::Given(means))?,
            TermLayout::VaryingCoefficient {
                by,
                knots,
                diff_order,
                means,
            } => {
                let c = means.as_deref().map_or(Centering::None, Centering::Given);
                spline_term(&data.t, Some(&data.covariates[*by]), knots, *diff_order, c)?
            }
            TermLayout::RandomEffect { levels, by } => {
                let by = by.map(|b| data.covariates[b].as_slice());
                random_effect_term(&data.groups, levels, by).map_err(level_error)?
            }
            TermLayout::Fre {
                levels,
                by,
                knots,
                diff_order,
            } => {
                let by = by.map(|b| data.covariates[b].as_slice());
                fre_term(&data.groups, levels, &data.t, by, knots, *diff_order)
                    .map_err(level_error)?
            }
        };
        Ok(tb)
    }

    /// Design columns only, without rebuilding penalties.
    pub fn block(&self, data: &PredictorData) -> Result<DMatrix<f64>, FitError> {
        Ok(self.evaluate(data)?.design_block)
    }
}

fn level_error(e: basis::BasisError) -> FitError {
    match e {
        basis::BasisError::UnknownLevel(l) => FitError::UnknownLevel(l),
        other => other.into(),
    }
}

/// Evaluates all terms on `data` and concatenates their columns.
pub fn model_matrix(layout: &[TermLayout], data: &PredictorData) -> Result<DMatrix<f64>, FitError> {
    let blocks = layout
        .iter()
        .map(|l| l.block(data))
        .collect::<Result<Vec<_>, _>>()?;
    let p: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut x = DMatrix::zeros(data.len(), p);
    let mut at = 0;
    for b in blocks {
        x.view_mut((0, at), (b.nrows(), b.ncols())).copy_from(&b);
        at += b.ncols();
    }
    Ok(x)
}

/// Builds the design for `spec` on `ped`, checking that `X` has full column
/// rank.
pub fn build_design(ped: &PedDataset, spec: &ModelSpec) -> Result<Design, FitError> {
    let layout = resolve_layout(spec, ped)?;
    let design = assemble(ped, spec, layout)?;
    check_penalized_rank(&design)?;
    Ok(design)
}

pub(crate) fn assemble(
    ped: &PedDataset,
    spec: &ModelSpec,
    layout: Vec<TermLayout>,
) -> Result<Design, FitError> {
    let data = PredictorData::from_ped(ped);
    let bases = layout
        .iter()
        .map(|l| l.evaluate(&data))
        .collect::<Result<Vec<_>, _>>()?;
    let p: usize = bases.iter().map(TermBasis::ncols).sum();
    let n = data.len();
    let mut x = DMatrix::zeros(n, p);
    let mut terms = Vec::new();
    let mut penalties = Vec::new();
    let mut blocks = Vec::new();
    let mut at = 0;
    for (i, (tb, term_spec)) in bases.into_iter().zip(&spec.terms).enumerate() {
        let width = tb.ncols();
        let cols = at..at + width;
        x.view_mut((0, at), (n, tb.ncols()))
            .copy_from(&tb.design_block);
        let label = term_label(term_spec, &ped.schema);
        let column_labels = tb
            .column_labels
            .iter()
            .map(|c| {
                if c.is_empty() {
                    label.clone()
                } else {
                    format!("{label}.{c}")
                }
            })
            .map(|c| {
                if tb.kind == TermKind::Intercept {
                    "(Intercept)".to_string()
                } else {
                    c
                }
            })
            .collect();
        if !tb.penalties.is_empty() {
            let first = penalties.len();
            let mut sum = DMatrix::zeros(tb.ncols(), tb.ncols());
            for (pm, plabel) in tb.penalties.iter().cloned() {
                sum += &pm.matrix;
                penalties.push(Penalty {
                    term: i,
                    label: format!("{label}:{plabel}"),
                    columns: cols.clone(),
                    matrix: pm,
                });
            }
            blocks.push(PenaltyBlock {
                columns: cols.clone(),
                penalties: (first..penalties.len()).collect(),
                rank: PenaltyMatrix::from_matrix(sum).rank,
            });
        }
        terms.push(TermInfo {
            label,
            kind: tb.kind,
            columns: cols,
            column_labels,
        });
        at += tb.ncols();
    }
    Ok(Design {
        sparse: SparseRows::from_dense(&x),
        x,
        offset: DVector::from_iterator(n, ped.rows.iter().map(|r| r.offset)),
        response: DVector::from_iterator(n, ped.rows.iter().map(|r| f64::from(r.delta))),
        penalties,
        blocks,
        terms,
        layout,
    })
}

/// Smallest singular value must exceed `1e-8` times the largest.
pub fn check_rank(x: &DMatrix<f64>) -> Result<(), FitError> {
    if x.ncols() == 0 {
        return Err(FitError::InvalidSpec("model has no columns".into()));
    }
    if x.nrows() < x.ncols() {
        return Err(FitError::RankDeficient { ratio: 0.0 });
    }
    // eigenvalues of the Gram matrix lose half the digits; use R from QR instead
    let r = x.clone().qr().r();
    let sv = r.singular_values();
    let (max, min) = (sv.max(), sv.min());
    if !(min > 1e-8 * max) {
        return Err(FitError::RankDeficient {
            ratio: if max > 0.0 { min / max } else { 0.0 },
        });
    }
    Ok(())
}

/// Rank check of `X` stacked on a square root of each block's penalty sum.
///
/// Columns that the data leave undetermined but a penalty pins down (sparse
/// late follow-up in one group, say) pass; directions in every penalty's null
/// space that `X` cannot separate still fail. Each block's root is scaled to
/// match the trace of its `XᵀX` block so the tolerance is scale-free.
pub fn check_penalized_rank(design: &Design) -> Result<(), FitError> {
    let x = &design.x;
    let p = x.ncols();
    let mut roots = Vec::new();
    for block in &design.blocks {
        let r = &block.columns;
        let mut sum = DMatrix::zeros(r.len(), r.len());
        for &k in &block.penalties {
            sum += &design.penalties[k].matrix.matrix;
        }
        let x_trace: f64 = x.columns(r.start, r.len()).norm_squared();
        let s_trace = sum.trace();
        if s_trace <= 0.0 {
            continue;
        }
        let scale = if x_trace > 0.0 {
            x_trace / s_trace
        } else {
            1.0
        };
        let eig = SymmetricEigen::new(sum * scale);
        for (i, &e) in eig.eigenvalues.iter().enumerate() {
            if e > 0.0 {
                let mut row = DVector::zeros(p);
                row.rows_mut(r.start, r.len())
                    .copy_from(&(eig.eigenvectors.column(i) * e.sqrt()));
                roots.push(row);
            }
        }
    }
    if roots.is_empty() {
        return check_rank(x);
    }
    let mut aug = DMatrix::zeros(x.nrows() + roots.len(), p);
    aug.rows_mut(0, x.nrows()).copy_from(x);
    for (i, row) in roots.iter().enumerate() {
        aug.row_mut(x.nrows() + i).copy_from(&row.transpose());
    }
    check_rank(&aug)
}

/// Top-`rank` eigenvalue log-determinant of a symmetric block.
pub(crate) fn log_pdet(block: DMatrix<f64>, rank: usize) -> f64 {
    let mut eig: Vec<f64> = SymmetricEigen::new(block)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    eig.iter().take(rank).map(|e| e.ln()).sum()
}
