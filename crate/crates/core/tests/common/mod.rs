//! Fixtures and independent reference computations shared by the
//! integration tests. Nothing here calls into the fitting code beyond
//! reading a design matrix.
#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use pamm::fit::{FittedModel, KnotSpec, ModelSpec, TermSpec};
use pamm::ped::{Schema, SurvivalData, SurvivalRecord};
use rand::Rng;

pub fn schema() -> Schema {
    Schema {
        covariates: vec!["x1".into(), "x2".into()],
        group_name: "g".into(),
        group_levels: vec!["a".into(), "b".into(), "c".into()],
    }
}

/// `n` subjects with hazard `exp(-0.5 + 0.4 x1)`, uniform censoring and
/// random groups.
pub fn random_data<R: Rng>(rng: &mut R, n: usize) -> SurvivalData {
    let schema = schema();
    let records = (0..n)
        .map(|i| {
            let x1: f64 = rng.random_range(-1.0..1.0);
            let x2: f64 = rng.random();
            let u: f64 = 1.0 - rng.random::<f64>();
            let t = -u.ln() / (-0.5 + 0.4 * x1).exp();
            let c = rng.random_range(0.5..4.0);
            let g = rng.random_range(0..3);
            SurvivalRecord {
                id: format!("s{i}"),
                time: t.min(c).max(1e-3),
                event: t <= c,
                covariates: vec![x1, x2],
                group: schema.group_levels[g].clone(),
            }
        })
        .collect();
    SurvivalData::new(schema, records).unwrap()
}

pub fn knots(n_interior: usize) -> KnotSpec {
    KnotSpec {
        n_interior,
        ..KnotSpec::default()
    }
}

pub fn spec(terms: Vec<TermSpec>) -> ModelSpec {
    ModelSpec::new(terms)
}

/// Gaussian elimination with partial pivoting on a copy of `a`.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let piv = (k..n)
            .max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))
            .unwrap();
        a.swap(k, piv);
        b.swap(k, piv);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    x
}

fn rows_of(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows())
        .map(|i| x.row(i).iter().copied().collect())
        .collect()
}

/// `Σ y (η + o) − exp(η + o) − ½ βᵀSβ` computed row by row.
pub fn penalized_objective(
    x: &[Vec<f64>],
    y: &[f64],
    o: &[f64],
    s: &DMatrix<f64>,
    beta: &[f64],
) -> f64 {
    let mut ll = 0.0;
    for (i, row) in x.iter().enumerate() {
        let e: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>() + o[i];
        ll += y[i] * e - e.exp();
    }
    let p = beta.len();
    let mut pen = 0.0;
    for a in 0..p {
        for b in 0..p {
            pen += beta[a] * s[(a, b)] * beta[b];
        }
    }
    ll - 0.5 * pen
}

/// Plain Newton–Raphson maximizer of the penalized Poisson log-likelihood.
pub fn newton_oracle(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    offset: &DVector<f64>,
    s: &DMatrix<f64>,
) -> Vec<f64> {
    let rows = rows_of(x);
    let y: Vec<f64> = y.iter().copied().collect();
    let o: Vec<f64> = offset.iter().copied().collect();
    let p = x.ncols();
    let mut beta = vec![0.0; p];
    for _ in 0..500 {
        let mut grad = vec![0.0; p];
        let mut hess = vec![vec![0.0; p]; p];
        for (i, row) in rows.iter().enumerate() {
            let mu = (row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + o[i]).exp();
            for a in 0..p {
                grad[a] += (y[i] - mu) * row[a];
                for b in 0..p {
                    hess[a][b] += mu * row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..p {
                grad[a] -= s[(a, b)] * beta[b];
                hess[a][b] += s[(a, b)];
            }
        }
        let step = gauss_solve(hess, grad.clone());
        let f0 = penalized_objective(&rows, &y, &o, s, &beta);
        let mut t = 1.0;
        let mut cand: Vec<f64>;
        loop {
            cand = beta.iter().zip(&step).map(|(b, d)| b + t * d).collect();
            // near the optimum objective differences are pure rounding
            if penalized_objective(&rows, &y, &o, s, &cand) >= f0 - 1e-12 * f0.abs() || t < 1e-12 {
                break;
            }
            t *= 0.5;
        }
        let moved = step.iter().map(|d| (t * d).abs()).fold(0.0, f64::max);
        beta = cand;
        if moved < 1e-13 || grad.iter().map(|g| g.abs()).fold(0.0, f64::max) < 1e-12 {
            break;
        }
    }
    beta
}

fn log_det_eigen(m: DMatrix<f64>, rel_cut: Option<f64>) -> (f64, usize) {
    let ev = SymmetricEigen::new(m).eigenvalues;
    let max = ev.iter().copied().fold(0.0, f64::max);
    let cut = rel_cut.map_or(0.0, |c| c * max);
    let kept: Vec<f64> = ev.iter().copied().filter(|&e| e > cut).collect();
    (kept.iter().map(|e| e.ln()).sum(), ev.len() - kept.len())
}

/// Laplace-approximate restricted log-likelihood from dense
/// eigendecompositions, at the oracle Newton solution.
pub fn reml_oracle(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    offset: &DVector<f64>,
    s: &DMatrix<f64>,
    penalized: &[usize],
) -> f64 {
    let beta = DVector::from_vec(newton_oracle(x, y, offset, s));
    let mu: DVector<f64> = (x * &beta + offset).map(f64::exp);
    let ll: f64 = (0..y.len()).map(|i| y[i] * mu[i].ln() - mu[i]).sum();
    let pen = beta.dot(&(s * &beta));
    let q = penalized.len();
    let sp = DMatrix::from_fn(q, q, |a, b| s[(penalized[a], penalized[b])]);
    let (log_s, null_dim) = log_det_eigen(sp, Some(1e-10));
    let mut h = s.clone();
    for i in 0..y.len() {
        let r = x.row(i);
        h += r.transpose() * r * mu[i];
    }
    let (log_h, _) = log_det_eigen(h, None);
    ll - 0.5 * pen + 0.5 * log_s - 0.5 * log_h + 0.5 * null_dim as f64 * (2.0 * PI).ln()
}

/// Survival log-likelihood `Σ δ log λ(t) − Λ(t)` of a fitted model, with the
/// hazard read off interval by interval at each cut point.
pub fn survival_loglik_oracle(model: &FittedModel, data: &SurvivalData) -> f64 {
    let k = model.cuts.kappas();
    let mut ll = 0.0;
    for r in &data.records {
        let mut cum = 0.0;
        for j in 1..k.len() {
            if r.time <= k[j - 1] {
                break;
            }
            let h = model.predict_hazard(&r.covariates, &r.group, k[j]).unwrap();
            cum += h * (r.time.min(k[j]) - k[j - 1]);
            if r.time <= k[j] && r.event {
                ll += h.ln();
            }
        }
        ll -= cum;
    }
    ll
}

/// One-sample Kolmogorov–Smirnov statistic against the CDF `cdf`.
pub fn ks_statistic(mut x: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic 1% critical value of the KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.627_6 / (n as f64).sqrt()
}
