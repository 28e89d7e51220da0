//! Laplace-approximate restricted likelihood and smoothing-parameter search.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::basis::PenaltyMatrix;

use super::design::{log_pdet, Design};
use super::pirls::{pirls_from, poisson_loglik, PirlsFit};
use super::FitError;

/// Components of the restricted log-likelihood at one `λ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemlParts {
    pub loglik: f64,
    pub penalty: f64,
    pub log_det_s: f64,
    pub log_det_h: f64,
    pub null_dim: usize,
}

impl RemlParts {
    pub fn value(&self) -> f64 {
        self.loglik - 0.5 * self.penalty + 0.5 * self.log_det_s - 0.5 * self.log_det_h
            + 0.5 * self.null_dim as f64 * (2.0 * PI).ln()
    }
}

/// Evaluates the criterion terms at a converged PIRLS fit.
///
/// `log|S_λ|₊` is taken per term block over the structural rank of the
/// block's penalty sum, so it stays continuous as smoothing parameters of
/// different terms drift apart.
pub fn reml_parts(design: &Design, lambdas: &[f64], fit: &PirlsFit) -> Result<RemlParts, FitError> {
    let s = design.s_lambda(lambdas);
    let penalty = fit.beta.dot(&(&s * &fit.beta));
    let mut log_det_s = 0.0;
    let mut null_dim = 0;
    for block in &design.blocks {
        let active: Vec<usize> = block
            .penalties
            .iter()
            .copied()
            .filter(|&k| lambdas[k] > 0.0)
            .collect();
        if active.is_empty() {
            // a block with all smoothing parameters at zero is unpenalized
            continue;
        }
        let rank = if active.len() == block.penalties.len() {
            block.rank
        } else {
            let sum = active.iter().fold(
                DMatrix::zeros(block.columns.len(), block.columns.len()),
                |acc, &k| acc + &design.penalties[k].matrix.matrix,
            );
            PenaltyMatrix::from_matrix(sum).rank
        };
        let r = &block.columns;
        let sub = s.view((r.start, r.start), (r.len(), r.len())).into_owned();
        log_det_s += log_pdet(sub, rank);
        null_dim += r.len() - rank;
    }
    let log_det_h = 2.0
        * fit
            .chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    let parts = RemlParts {
        loglik: poisson_loglik(&design.response, &fit.mu),
        penalty,
        log_det_s,
        log_det_h,
        null_dim,
    };
    if !parts.value().is_finite() {
        return Err(FitError::NonFinite("restricted log-likelihood"));
    }
    Ok(parts)
}

pub fn reml_criterion(design: &Design, lambdas: &[f64]) -> Result<f64, FitError> {
    let fit = pirls_from(design, lambdas, None)?;
    Ok(reml_parts(design, lambdas, &fit)?.value())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingSelection {
    pub lambdas: Vec<f64>,
    pub reml: f64,
    pub evaluations: usize,
    /// Criterion at each grid point, in grid order.
    pub grid: Vec<(Vec<f64>, f64)>,
    pub simplex_diameter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerOptions {
    /// Starting values per smoothing parameter, on the λ scale.
    pub grid: [f64; 3],
    pub tolerance: f64,
    pub max_evaluations: usize,
    pub log_lambda_bounds: (f64, f64),
    /// Number of best grid points tried as simplex starts before giving up.
    pub starts: usize,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            grid: [1e-3, 1.0, 1e3],
            tolerance: 1e-4,
            max_evaluations: 2000,
            log_lambda_bounds: (-20.0, 28.0),
            starts: 3,
        }
    }
}

/// Criterion evaluator that warm-starts PIRLS from the last converged fit.
struct Objective<'a> {
    design: &'a Design,
    warm: Option<DVector<f64>>,
    evaluations: usize,
    bounds: (f64, f64),
}

impl Objective<'_> {
    fn eval(&mut self, rho: &[f64]) -> f64 {
        self.evaluations += 1;
        let lambdas: Vec<f64> = rho
            .iter()
            .map(|r| r.clamp(self.bounds.0, self.bounds.1).exp())
            .collect();
        let fit = pirls_from(self.design, &lambdas, self.warm.as_ref())
            .or_else(|_| pirls_from(self.design, &lambdas, None));
        match fit {
            Ok(fit) => match reml_parts(self.design, &lambdas, &fit) {
                Ok(p) => {
                    self.warm = Some(fit.beta);
                    p.value()
                }
                Err(_) => f64::NEG_INFINITY,
            },
            Err(_) => f64::NEG_INFINITY,
        }
    }
}

/// Maximizes the restricted likelihood over `log λ`: grid scan, then
/// Nelder–Mead from the best grid points.
pub fn optimize_smoothing(
    design: &Design,
    opts: &OptimizerOptions,
) -> Result<SmoothingSelection, FitError> {
    let k = design.n_lambdas();
    if k == 0 {
        let value = reml_criterion(design, &[])?;
        return Ok(SmoothingSelection {
            lambdas: vec![],
            reml: value,
            evaluations: 1,
            grid: vec![],
            simplex_diameter: 0.0,
        });
    }
    let mut obj = Objective {
        design,
        warm: None,
        evaluations: 0,
        bounds: opts.log_lambda_bounds,
    };
    let logs: Vec<f64> = opts.grid.iter().map(|g| g.ln()).collect();
    let mut grid = Vec::with_capacity(3usize.pow(k as u32));
    for idx in 0..3usize.pow(k as u32) {
        let rho: Vec<f64> = (0..k)
            .map(|d| logs[(idx / 3usize.pow(d as u32)) % 3])
            .collect();
        let v = obj.eval(&rho);
        grid.push((rho, v));
    }
    let mut order: Vec<usize> = (0..grid.len()).filter(|&i| grid[i].1.is_finite()).collect();
    order.sort_by(|&a, &b| grid[b].1.total_cmp(&grid[a].1));
    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    for &start in order.iter().take(opts.starts) {
        let res = nelder_mead(&mut obj, &grid[start].0, 1.0, opts);
        if let Some((x, v, diam)) = res {
            if diam < opts.tolerance {
                best = Some((x, v, diam));
                break;
            }
        }
    }
    let (rho, value, diam) = best.ok_or(FitError::AllStartsFailed)?;
    let clamp = |r: f64| r.clamp(opts.log_lambda_bounds.0, opts.log_lambda_bounds.1);
    Ok(SmoothingSelection {
        lambdas: rho.iter().map(|&r| clamp(r).exp()).collect(),
        reml: value,
        evaluations: obj.evaluations,
        grid: grid
            .into_iter()
            .map(|(r, v)| (r.into_iter().map(|x| clamp(x).exp()).collect(), v))
            .collect(),
        simplex_diameter: diam,
    })
}

/// Maximizes `obj` from `x0`; returns the best vertex, its value and the
/// final simplex diameter.
fn nelder_mead(
    obj: &mut Objective<'_>,
    x0: &[f64],
    step: f64,
    opts: &OptimizerOptions,
) -> Option<(Vec<f64>, f64, f64)> {
    let n = x0.len();
    let (lo, hi) = opts.log_lambda_bounds;
    let clamp = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x.clamp(lo, hi)).collect() };
    // minimize the negated criterion
    let f = |x: &[f64], o: &mut Objective<'_>| -o.eval(x);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = f(x0, obj);
    if !v0.is_finite() {
        return None;
    }
    simplex.push((x0.to_vec(), v0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += if x[i] + step <= hi { step } else { -step };
        let v = f(&x, obj);
        simplex.push((x, v));
    }
    let budget = obj.evaluations + opts.max_evaluations;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let diam = simplex
            .iter()
            .skip(1)
            .map(|(x, _)| {
                x.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        if diam < opts.tolerance || obj.evaluations >= budget {
            let (x, v) = simplex.swap_remove(0);
            return v.is_finite().then(|| (x, -v, diam));
        }
        let centroid: Vec<f64> = (0..n)
            .map(|d| simplex[..n].iter().map(|(x, _)| x[d]).sum::<f64>() / n as f64)
            .collect();
        let worst = simplex[n].clone();
        let along = |t: f64| -> Vec<f64> {
            clamp(
                centroid
                    .iter()
                    .zip(&worst.0)
                    .map(|(c, w)| c + t * (c - w))
                    .collect(),
            )
        };
        let xr = along(1.0);
        let fr = f(&xr, obj);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = f(&xe, obj);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst.1 {
                let xc = along(0.5);
                let fc = f(&xc, obj);
                (xc, fc)
            } else {
                let xc = along(-0.5);
                let fc = f(&xc, obj);
                (xc, fc)
            };
            if fc < worst.1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> =
                        v.0.iter()
                            .zip(&best)
                            .map(|(a, b)| b + 0.5 * (a - b))
                            .collect();
                    let fx = f(&x, obj);
                    *v = (x, fx);
                }
            }
        }
    }
}
