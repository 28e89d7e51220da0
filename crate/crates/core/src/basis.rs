//! B-spline bases, difference penalties, random-effect indicator bases and the
//! tensor-product construction of functional random effects.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("value {x} lies outside the boundary knots [{a}, {b}]")]
    OutOfRange { x: f64, a: f64, b: f64 },
    #[error("interior knots must be strictly increasing and inside ({a}, {b})")]
    BadKnots { a: f64, b: f64 },
    #[error("basis of dimension {dim} cannot carry a difference penalty of order {order}")]
    PenaltyOrder { dim: usize, order: usize },
    #[error("group label {0:?} is not among the declared levels")]
    UnknownLevel(String),
    #[error("row counts differ: {0} vs {1}")]
    RowMismatch(usize, usize),
    #[error("need at least one group level")]
    NoLevels,
    #[error("cannot place knots: {0}")]
    Placement(String),
}

/// Knot sequence of a B-spline basis on `[a, b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    pub degree: usize,
    pub interior: Vec<f64>,
    pub boundary: (f64, f64),
}

impl KnotVector {
    pub fn new(
        degree: usize,
        interior: Vec<f64>,
        boundary: (f64, f64),
    ) -> Result<Self, BasisError> {
        let (a, b) = boundary;
        let ok = a.is_finite()
            && b.is_finite()
            && a < b
            && interior.iter().all(|&k| k > a && k < b)
            && interior.windows(2).all(|w| w[1] > w[0]);
        if !ok {
            return Err(BasisError::BadKnots { a, b });
        }
        Ok(Self {
            degree,
            interior,
            boundary,
        })
    }

    /// `n_interior` knots splitting `[a, b]` into equal-width segments.
    pub fn equidistant(
        degree: usize,
        n_interior: usize,
        boundary: (f64, f64),
    ) -> Result<Self, BasisError> {
        let (a, b) = boundary;
        let h = (b - a) / (n_interior + 1) as f64;
        Self::new(
            degree,
            (1..=n_interior).map(|i| a + i as f64 * h).collect(),
            boundary,
        )
    }

    /// Interior knots at the `i / (n_interior + 1)` empirical quantiles of
    /// `values`.
    pub fn quantile(
        degree: usize,
        n_interior: usize,
        values: &[f64],
        boundary: (f64, f64),
    ) -> Result<Self, BasisError> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return Err(BasisError::Placement("no values".into()));
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let interior: Vec<f64> = (1..=n_interior)
            .map(|i| {
                // linear interpolation between order statistics (type 7)
                let h = (n - 1) as f64 * i as f64 / (n_interior + 1) as f64;
                let lo = h.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                v[lo] + (h - lo as f64) * (v[hi] - v[lo])
            })
            .collect();
        Self::new(degree, interior, boundary)
            .map_err(|_| BasisError::Placement("quantiles are tied or touch the boundary".into()))
    }

    pub fn dim(&self) -> usize {
        self.interior.len() + self.degree + 1
    }

    /// Extended sequence with `degree + 1` copies of each boundary knot.
    pub fn full(&self) -> Vec<f64> {
        let (a, b) = self.boundary;
        let mut k = vec![a; self.degree + 1];
        k.extend_from_slice(&self.interior);
        k.extend(std::iter::repeat_n(b, self.degree + 1));
        k
    }
}

/// Evaluates all `D` B-spline basis functions at each `x` (Cox–de Boor).
pub fn bspline_basis(x: &[f64], knots: &KnotVector) -> Result<DMatrix<f64>, BasisError> {
    let p = knots.degree;
    let full = knots.full();
    let dim = knots.dim();
    let (a, b) = knots.boundary;
    let mut out = DMatrix::zeros(x.len(), dim);
    let mut left = vec![0.0; p + 1];
    let mut right = vec![0.0; p + 1];
    let mut vals = vec![0.0; p + 1];
    for (r, &xv) in x.iter().enumerate() {
        if !(xv >= a && xv <= b) {
            return Err(BasisError::OutOfRange { x: xv, a, b });
        }
        // span index: full[span] <= x < full[span + 1], last span closed at b
        let span = if xv >= b {
            dim - 1
        } else {
            full.partition_point(|&k| k <= xv) - 1
        };
        vals[0] = 1.0;
        for j in 1..=p {
            left[j] = xv - full[span + 1 - j];
            right[j] = full[span + j] - xv;
            let mut saved = 0.0;
            for i in 0..j {
                let tmp = vals[i] / (right[i + 1] + left[j - i]);
                vals[i] = saved + right[i + 1] * tmp;
                saved = left[j - i] * tmp;
            }
            vals[j] = saved;
        }
        for (i, &v) in vals.iter().enumerate() {
            out[(r, span - p + i)] = v;
        }
    }
    Ok(out)
}

/// Symmetric positive semi-definite penalty with its numerical rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyMatrix {
    pub matrix: DMatrix<f64>,
    pub rank: usize,
    pub null_dim: usize,
}

impl PenaltyMatrix {
    /// Wraps `matrix`, counting eigenvalues above `1e-10 · max` as its rank.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Self {
        let n = matrix.nrows();
        let rank = if n == 0 {
            0
        } else {
            let eig = SymmetricEigen::new(matrix.clone()).eigenvalues;
            let max = eig.iter().copied().fold(0.0f64, f64::max);
            eig.iter()
                .filter(|&&e| e > 1e-10 * max && max > 0.0)
                .count()
        };
        Self {
            matrix,
            rank,
            null_dim: n - rank,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn quadratic_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&(&self.matrix * v))
    }
}

/// `order`-th difference operator of shape `(dim - order) × dim`.
pub fn difference_matrix(dim: usize, order: usize) -> Result<DMatrix<f64>, BasisError> {
    if dim <= order {
        return Err(BasisError::PenaltyOrder { dim, order });
    }
    let mut d = DMatrix::<f64>::identity(dim, dim);
    for _ in 0..order {
        let rows = d.nrows() - 1;
        d = DMatrix::from_fn(rows, dim, |i, j| d[(i + 1, j)] - d[(i, j)]);
    }
    Ok(d)
}

/// P-spline penalty `DᵀD`.
pub fn difference_penalty(dim: usize, order: usize) -> Result<PenaltyMatrix, BasisError> {
    let d = difference_matrix(dim, order)?;
    let mut s = d.tr_mul(&d);
    symmetrize(&mut s);
    Ok(PenaltyMatrix {
        matrix: s,
        rank: dim - order,
        null_dim: order,
    })
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// One-hot encoding of `groups` against the ordered `levels`.
pub fn indicator_basis<S: AsRef<str>>(
    groups: &[S],
    levels: &[String],
) -> Result<DMatrix<f64>, BasisError> {
    if levels.is_empty() {
        return Err(BasisError::NoLevels);
    }
    let mut out = DMatrix::zeros(groups.len(), levels.len());
    for (r, g) in groups.iter().enumerate() {
        let g = g.as_ref();
        let c = levels
            .iter()
            .position(|l| l == g)
            .ok_or_else(|| BasisError::UnknownLevel(g.to_string()))?;
        out[(r, c)] = 1.0;
    }
    Ok(out)
}

/// Row-wise Kronecker product; column `d1 * D2 + d2` holds `B1[r, d1] · B2[r, d2]`.
pub fn tensor_product_rows(
    b1: &DMatrix<f64>,
    b2: &DMatrix<f64>,
) -> Result<DMatrix<f64>, BasisError> {
    if b1.nrows() != b2.nrows() {
        return Err(BasisError::RowMismatch(b1.nrows(), b2.nrows()));
    }
    let (d1, d2) = (b1.ncols(), b2.ncols());
    let mut out = DMatrix::zeros(b1.nrows(), d1 * d2);
    for r in 0..b1.nrows() {
        for i in 0..d1 {
            let a = b1[(r, i)];
            if a == 0.0 {
                continue;
            }
            for j in 0..d2 {
                out[(r, i * d2 + j)] = a * b2[(r, j)];
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Intercept,
    Linear,
    Factor,
    Smooth,
    VaryingCoefficient,
    RandomEffect,
    Fre,
}

/// Design columns of one model term together with its penalties.
#[derive(Debug, Clone, PartialEq)]
pub struct TermBasis {
    pub kind: TermKind,
    pub design_block: DMatrix<f64>,
    pub penalties: Vec<(PenaltyMatrix, String)>,
    pub column_labels: Vec<String>,
    /// Column means subtracted by the sum-to-zero constraint, if applied.
    pub column_means: Option<Vec<f64>>,
}

impl TermBasis {
    pub fn ncols(&self) -> usize {
        self.design_block.ncols()
    }
}

fn scale_rows(m: &mut DMatrix<f64>, x: &[f64]) {
    for (r, &s) in x.iter().enumerate() {
        m.row_mut(r).scale_mut(s);
    }
}

/// Subtracts `means` from each column and drops the last column.
///
/// For a basis with partition of unity the centered columns sum to zero, so
/// the dropped column is redundant; the penalty loses its last row and column.
pub fn center_block(block: &DMatrix<f64>, means: &[f64]) -> DMatrix<f64> {
    let keep = block.ncols() - 1;
    DMatrix::from_fn(block.nrows(), keep, |r, c| block[(r, c)] - means[c])
}

pub fn column_means(block: &DMatrix<f64>) -> Vec<f64> {
    let n = block.nrows().max(1) as f64;
    block.column_iter().map(|c| c.sum() / n).collect()
}

fn drop_last(pen: &PenaltyMatrix) -> PenaltyMatrix {
    let k = pen.dim() - 1;
    PenaltyMatrix::from_matrix(pen.matrix.view((0, 0), (k, k)).into_owned())
}

/// P-spline smooth of `t`, optionally multiplied row-wise by `by`.
///
/// With `center` the block satisfies a sum-to-zero constraint over the
/// supplied rows (or the stored `means`, when re-evaluating for prediction).
pub fn spline_term(
    t: &[f64],
    by: Option<&[f64]>,
    knots: &KnotVector,
    diff_order: usize,
    center: Centering<'_>,
) -> Result<TermBasis, BasisError> {
    let raw = bspline_basis(t, knots)?;
    let pen = difference_penalty(raw.ncols(), diff_order)?;
    let (mut block, pen, means) = match center {
        Centering::None => (raw, pen, None),
        Centering::Estimate => {
            let m = column_means(&raw);
            (center_block(&raw, &m), drop_last(&pen), Some(m))
        }
        Centering::Given(m) => (center_block(&raw, m), drop_last(&pen), Some(m.to_vec())),
    };
    if let Some(x) = by {
        if x.len() != t.len() {
            return Err(BasisError::RowMismatch(t.len(), x.len()));
        }
        scale_rows(&mut block, x);
    }
    let kind = if by.is_some() {
        TermKind::VaryingCoefficient
    } else {
        TermKind::Smooth
    };
    let labels = (1..=block.ncols()).map(|i| format!("s(t).{i}")).collect();
    Ok(TermBasis {
        kind,
        design_block: block,
        penalties: vec![(pen, "smooth".into())],
        column_labels: labels,
        column_means: means,
    })
}

#[derive(Debug, Clone, Copy)]
pub enum Centering<'a> {
    None,
    Estimate,
    Given(&'a [f64]),
}

/// Baseline smooth `f(t)` with a P-spline penalty.
pub fn smooth_term(
    t: &[f64],
    knots: &KnotVector,
    diff_order: usize,
    centered: bool,
) -> Result<TermBasis, BasisError> {
    spline_term(
        t,
        None,
        knots,
        diff_order,
        if centered {
            Centering::Estimate
        } else {
            Centering::None
        },
    )
}

/// i.i.d. group effects `γ_g` (times `by`, when given) with ridge penalty `I_G`.
pub fn random_effect_term<S: AsRef<str>>(
    groups: &[S],
    levels: &[String],
    by: Option<&[f64]>,
) -> Result<TermBasis, BasisError> {
    let mut block = indicator_basis(groups, levels)?;
    if let Some(x) = by {
        if x.len() != groups.len() {
            return Err(BasisError::RowMismatch(groups.len(), x.len()));
        }
        scale_rows(&mut block, x);
    }
    let g = levels.len();
    Ok(TermBasis {
        kind: TermKind::RandomEffect,
        design_block: block,
        penalties: vec![(
            PenaltyMatrix::from_matrix(DMatrix::identity(g, g)),
            "ridge".into(),
        )],
        column_labels: levels.iter().map(|l| format!("re.{l}")).collect(),
        column_means: None,
    })
}

/// Functional random coefficient `f_g(t) · x`: indicator basis over groups
/// interacted with a B-spline basis over `t`, scaled by `x`.
///
/// Penalties: `I_G ⊗ DᵀD` for within-group smoothness and `I_{G·D}` for
/// shrinkage of the group curves.
pub fn fre_term<S: AsRef<str>>(
    groups: &[S],
    levels: &[String],
    t: &[f64],
    x: Option<&[f64]>,
    knots: &KnotVector,
    diff_order: usize,
) -> Result<TermBasis, BasisError> {
    if groups.len() != t.len() {
        return Err(BasisError::RowMismatch(groups.len(), t.len()));
    }
    let ind = indicator_basis(groups, levels)?;
    let spline = bspline_basis(t, knots)?;
    let mut block = tensor_product_rows(&ind, &spline)?;
    if let Some(x) = x {
        if x.len() != t.len() {
            return Err(BasisError::RowMismatch(t.len(), x.len()));
        }
        scale_rows(&mut block, x);
    }
    let (g, d) = (levels.len(), spline.ncols());
    let dtd = difference_penalty(d, diff_order)?;
    let smooth = kron_identity(g, &dtd.matrix);
    let smooth = PenaltyMatrix {
        matrix: smooth,
        rank: g * dtd.rank,
        null_dim: g * dtd.null_dim,
    };
    let shrink = PenaltyMatrix {
        matrix: DMatrix::identity(g * d, g * d),
        rank: g * d,
        null_dim: 0,
    };
    let labels = levels
        .iter()
        .flat_map(|l| (1..=d).map(move |i| format!("fre.{l}.{i}")))
        .collect();
    Ok(TermBasis {
        kind: TermKind::Fre,
        design_block: block,
        penalties: vec![(smooth, "smooth".into()), (shrink, "shrink".into())],
        column_labels: labels,
        column_means: None,
    })
}

/// `I_g ⊗ m`.
pub fn kron_identity(g: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    let mut out = DMatrix::zeros(g * d, g * d);
    for k in 0..g {
        out.view_mut((k * d, k * d), (d, d)).copy_from(m);
    }
    out
}
