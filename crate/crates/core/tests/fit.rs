mod common;

use common::{knots, newton_oracle, random_data, reml_oracle, spec};
use pamm::fit::{
    build_design, fit, fit_fixed, optimize_smoothing, penalized_loglik, pirls, reml_criterion,
    reml_parts, score, two_sided_p, FittedModel, OptimizerOptions, TermSpec,
};
use pamm::ped::{
    as_ped, make_cut_points, CutStrategy, PedDataset, Schema, SurvivalData, SurvivalRecord,
    TimeConvention,
};
use pamm::sim::sample_survival_time;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ped_of(data: &SurvivalData, j: usize) -> PedDataset {
    let cuts = make_cut_points(&data.times(), &CutStrategy::Equidistant(j)).unwrap();
    as_ped(data, &cuts, TimeConvention::End).unwrap()
}

fn random_ped(seed: u64, n: usize) -> PedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ped_of(&random_data(&mut rng, n), 10)
}

fn linear(c: &str) -> TermSpec {
    TermSpec::Linear {
        covariate: c.into(),
    }
}

fn smooth(n_int: usize) -> TermSpec {
    TermSpec::Smooth {
        knots: knots(n_int),
        diff_order: 1,
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn single_column_and_linear_designs() {
    let schema = Schema {
        covariates: vec!["x1".into()],
        group_name: "g".into(),
        group_levels: vec!["a".into()],
    };
    let records = [0.5, 1.0, 1.5]
        .iter()
        .enumerate()
        .map(|(i, &x)| SurvivalRecord {
            id: i.to_string(),
            time: 1.0,
            event: true,
            covariates: vec![x],
            group: "a".into(),
        })
        .collect();
    let data = SurvivalData::new(schema, records).unwrap();
    let ped = ped_of(&data, 1);
    let d = build_design(&ped, &spec(vec![TermSpec::Intercept])).unwrap();
    assert_eq!(d.x.shape(), (3, 1));
    assert!(d.x.iter().all(|&v| v == 1.0));
    assert!(d.penalties.is_empty());
    let d = build_design(&ped, &spec(vec![TermSpec::Intercept, linear("x1")])).unwrap();
    assert_eq!(d.x.column(1).as_slice(), &[0.5, 1.0, 1.5]);
}

#[test]
fn centered_baseline_has_zero_column_sums() {
    let ped = random_ped(1, 60);
    let d = build_design(&ped, &spec(vec![TermSpec::Intercept, smooth(5)])).unwrap();
    for c in 1..d.ncols() {
        assert!(d.x.column(c).sum().abs() < 1e-9);
    }
    assert_eq!(d.penalties.len(), 1);
    assert_eq!(d.penalties[0].matrix.null_dim, 0);
}

#[test]
fn unpenalized_fit_matches_newton_oracle() {
    let terms = vec![
        TermSpec::Intercept,
        linear("x1"),
        linear("x2"),
        TermSpec::Factor {
            variable: "g".into(),
            reference: None,
        },
    ];
    for seed in 0..5 {
        let ped = random_ped(seed, 50);
        let d = build_design(&ped, &spec(terms.clone())).unwrap();
        let oracle = newton_oracle(&d.x, &d.response, &d.offset, &d.s_lambda(&[]));
        let fit = pirls(&d, &[]).unwrap();
        assert!(max_diff(fit.beta.as_slice(), &oracle) < 1e-6, "seed {seed}");
    }
}

#[test]
fn penalized_fit_matches_newton_oracle() {
    let terms = vec![TermSpec::Intercept, linear("x1"), smooth(6)];
    for (seed, lambda) in [(10, 0.1), (11, 2.0), (12, 50.0)] {
        let ped = random_ped(seed, 80);
        let d = build_design(&ped, &spec(terms.clone())).unwrap();
        let oracle = newton_oracle(&d.x, &d.response, &d.offset, &d.s_lambda(&[lambda]));
        let fit = pirls(&d, &[lambda]).unwrap();
        assert!(max_diff(fit.beta.as_slice(), &oracle) < 1e-6, "seed {seed}");
    }
}

fn two_penalty_terms() -> Vec<TermSpec> {
    vec![
        TermSpec::Intercept,
        smooth(5),
        TermSpec::VaryingCoefficient {
            by: "x1".into(),
            knots: knots(4),
            diff_order: 1,
            centered: false,
        },
    ]
}

#[test]
fn reml_matches_eigen_oracle() {
    for seed in 20..23 {
        let ped = random_ped(seed, 80);
        let d = build_design(&ped, &spec(two_penalty_terms())).unwrap();
        let penalized: Vec<usize> = d.blocks.iter().flat_map(|b| b.columns.clone()).collect();
        let lambdas = [1.0, 1.0];
        let oracle = reml_oracle(
            &d.x,
            &d.response,
            &d.offset,
            &d.s_lambda(&lambdas),
            &penalized,
        );
        let value = reml_criterion(&d, &lambdas).unwrap();
        assert!(
            (value - oracle).abs() < 1e-8,
            "seed {seed}: {value} vs {oracle}"
        );
    }
}

#[test]
fn reml_without_penalties_is_loglik() {
    let ped = random_ped(3, 40);
    let d = build_design(&ped, &spec(vec![TermSpec::Intercept, linear("x1")])).unwrap();
    let fit = pirls(&d, &[]).unwrap();
    let parts = reml_parts(&d, &[], &fit).unwrap();
    assert_eq!(parts.log_det_s, 0.0);
    assert_eq!(parts.null_dim, 0);
    assert!((parts.value() - (parts.loglik - 0.5 * parts.log_det_h)).abs() < 1e-12);
    assert_eq!(parts.penalty, 0.0);
}

#[test]
fn ridge_log_determinant_is_q_log_lambda() {
    let ped = random_ped(4, 60);
    let d = build_design(
        &ped,
        &spec(vec![
            TermSpec::Intercept,
            linear("x1"),
            TermSpec::RandomEffect {
                by: Some("x2".into()),
            },
        ]),
    )
    .unwrap();
    for lambda in [0.01, 3.0, 400.0] {
        let fit = pirls(&d, &[lambda]).unwrap();
        let parts = reml_parts(&d, &[lambda], &fit).unwrap();
        assert!((parts.log_det_s - 3.0 * f64::ln(lambda)).abs() < 1e-10);
    }
}

#[test]
fn score_matches_finite_differences() {
    for seed in 30..35 {
        let ped = random_ped(seed, 60);
        let d = build_design(&ped, &spec(two_penalty_terms())).unwrap();
        let lambdas = [0.7, 3.0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fit = pirls(&d, &lambdas).unwrap();
        let beta = fit.beta.map(|b| b + rng.random_range(-0.2..0.2));
        let g = score(&d, &lambdas, &beta);
        let h = 1e-5;
        let fd: Vec<f64> = (0..beta.len())
            .map(|i| {
                let mut up = beta.clone();
                let mut dn = beta.clone();
                up[i] += h;
                dn[i] -= h;
                (penalized_loglik(&d, &lambdas, &up) - penalized_loglik(&d, &lambdas, &dn))
                    / (2.0 * h)
            })
            .collect();
        let scale = g.amax().max(1.0);
        assert!(max_diff(g.as_slice(), &fd) / scale < 1e-5, "seed {seed}");
    }
}

#[test]
fn penalized_deviance_never_increases() {
    let ped = random_ped(5, 100);
    let d = build_design(&ped, &spec(two_penalty_terms())).unwrap();
    for lambdas in [[1e-3, 1e-3], [1.0, 10.0], [1e4, 1e-2]] {
        let fit = pirls(&d, &lambdas).unwrap();
        assert!(fit.history.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn zero_lambdas_give_full_edf_and_edf_decreases_in_lambda() {
    let s = spec(vec![TermSpec::Intercept, linear("x1"), smooth(5)]);
    for seed in 40..45 {
        let ped = random_ped(seed, 80);
        let free = fit_fixed(&ped, &s, &[0.0]).unwrap();
        assert!(
            (free.edf_total - free.beta.len() as f64).abs() < 1e-8,
            "seed {seed}: {}",
            free.edf_total
        );
        let mut last = f64::INFINITY;
        for lambda in [0.01, 0.1, 1.0, 10.0, 100.0] {
            let m = fit_fixed(&ped, &s, &[lambda]).unwrap();
            let e = m.term_edf("s(t)").unwrap();
            assert!(e < last, "seed {seed}: edf {e} at λ {lambda}");
            last = e;
        }
    }
}

#[test]
fn edf_bookkeeping() {
    let ped = random_ped(6, 100);
    let m = fit(&ped, &spec(two_penalty_terms())).unwrap();
    let sum: f64 = m.edf_per_term.iter().map(|(_, e)| e).sum();
    assert!((sum - m.edf_total).abs() < 1e-8);
    for (term, (label, e)) in m.terms.iter().zip(&m.edf_per_term) {
        assert_eq!(&term.label, label);
        assert!(
            *e >= -1e-10 && *e <= term.columns.len() as f64 + 1e-10,
            "{label}: {e}"
        );
    }
    assert!((m.term_edf("intercept").unwrap() - 1.0).abs() < 1e-8);
    let v = &m.covariance;
    assert!((v - v.transpose()).amax() < 1e-10);
    assert!(v.clone().cholesky().is_some());
}

#[test]
fn huge_lambda_flattens_uncentered_coefficient() {
    let ped = random_ped(7, 100);
    let s = spec(vec![
        TermSpec::Intercept,
        TermSpec::VaryingCoefficient {
            by: "x1".into(),
            knots: knots(5),
            diff_order: 1,
            centered: false,
        },
    ]);
    let m = fit_fixed(&ped, &s, &[1e8]).unwrap();
    let cols = m.terms[1].columns.clone();
    let coef: Vec<f64> = cols.map(|c| m.beta[c]).collect();
    let spread = coef.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
        - coef.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    assert!(spread < 1e-4, "{coef:?}");
}

#[test]
fn optimum_beats_every_grid_point() {
    let ped = random_ped(8, 120);
    let d = build_design(&ped, &spec(two_penalty_terms())).unwrap();
    let sel = optimize_smoothing(&d, &OptimizerOptions::default()).unwrap();
    assert_eq!(sel.grid.len(), 9);
    for (lambdas, v) in &sel.grid {
        assert!(
            sel.reml >= *v - 1e-9,
            "grid point {lambdas:?}: {v} > {}",
            sel.reml
        );
    }
    assert!(sel.simplex_diameter < 1e-4);
    let again = optimize_smoothing(&d, &OptimizerOptions::default()).unwrap();
    assert_eq!(again.lambdas, sel.lambdas);
}

/// 500 subjects with hazard `exp(log_hazard(t))`, followed up on `[0, 1]`.
fn curve_data(seed: u64, log_hazard: fn(f64) -> f64) -> PedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schema = Schema {
        covariates: vec![],
        group_name: "g".into(),
        group_levels: vec!["a".into()],
    };
    let records = (0..500)
        .map(|i| {
            let d = sample_survival_time(|t| log_hazard(t).exp(), &mut rng, 1.0).unwrap();
            SurvivalRecord {
                id: i.to_string(),
                time: d.time,
                event: !d.truncated,
                covariates: vec![],
                group: "a".into(),
            }
        })
        .collect();
    let data = SurvivalData::new(schema, records).unwrap();
    let cuts = make_cut_points(&[1.0], &CutStrategy::Equidistant(50)).unwrap();
    as_ped(&data, &cuts, TimeConvention::End).unwrap()
}

fn baseline_edf(ped: &PedDataset) -> f64 {
    let m = fit(ped, &spec(vec![TermSpec::Intercept, smooth(9)])).unwrap();
    m.term_edf("s(t)").unwrap()
}

fn mean_baseline_edf(log_hazard: fn(f64) -> f64) -> (f64, Vec<f64>) {
    let edfs: Vec<f64> = (0..20)
        .map(|seed| baseline_edf(&curve_data(seed, log_hazard)))
        .collect();
    (edfs.iter().sum::<f64>() / 20.0, edfs)
}

// Single seeds scatter widely around these bounds (EDF 0 to 3.9 under the
// linear truth), so the bounds apply to the 20-seed mean.
#[test]
fn linear_log_hazard_is_shrunk() {
    let (mean, edfs) = mean_baseline_edf(|t| -1.0 + 0.5 * t);
    assert!(mean <= 2.5, "mean edf {mean}: {edfs:?}");
}

#[test]
fn curved_log_hazard_keeps_wiggle() {
    let (mean, edfs) = mean_baseline_edf(|t| -1.0 + (2.0 * std::f64::consts::PI * t).sin());
    assert!(mean >= 4.0, "mean edf {mean}: {edfs:?}");
}

fn intercept_model(seed: u64) -> (PedDataset, FittedModel) {
    let ped = random_ped(seed, 70);
    let m = fit(&ped, &spec(vec![TermSpec::Intercept])).unwrap();
    (ped, m)
}

#[test]
fn intercept_only_closed_forms() {
    let (ped, m) = intercept_model(9);
    let events: f64 = ped.rows.iter().map(|r| f64::from(r.delta)).sum();
    let exposure: f64 = ped.rows.iter().map(|r| r.exposure).sum();
    let b0 = (events / exposure).ln();
    assert!((m.beta[0] - b0).abs() < 1e-10);
    for t in [1e-9, 0.3, 1.0, ped.cuts.last()] {
        let cum = m.cumulative_hazard(&[0.0, 0.0], "a", t).unwrap();
        assert!((cum - m.beta[0].exp() * t).abs() < 1e-12 * t.max(1.0));
        assert!((m.survival_prob(&[0.0, 0.0], "a", t).unwrap() - (-cum).exp()).abs() < 1e-15);
    }
    assert!(1.0 - m.survival_prob(&[0.0, 0.0], "a", 1e-12).unwrap() < 1e-11);
}

#[test]
fn predictions_are_positive_monotone_and_continuous() {
    let ped = random_ped(10, 120);
    let m = fit(&ped, &spec(two_penalty_terms())).unwrap();
    let last = ped.cuts.last();
    let grid: Vec<f64> = (1..=400).map(|i| last * i as f64 / 400.0).collect();
    for (x, g) in [([0.3, 0.1], "a"), ([-0.9, 0.8], "c")] {
        let mut prev_cum = 0.0;
        let mut prev_s = 1.0;
        for &t in &grid {
            assert!(m.predict_hazard(&x, g, t).unwrap() > 0.0);
            let cum = m.cumulative_hazard(&x, g, t).unwrap();
            let s = m.survival_prob(&x, g, t).unwrap();
            assert!(cum >= prev_cum && s <= prev_s);
            prev_cum = cum;
            prev_s = s;
        }
        for &k in &ped.cuts.kappas()[1..ped.cuts.kappas().len() - 1] {
            let left = m.cumulative_hazard(&x, g, k).unwrap();
            let right = m.cumulative_hazard(&x, g, k * (1.0 + 1e-12)).unwrap();
            assert!((right - left).abs() < 1e-9);
        }
    }
    assert!(m.predict_hazard(&[0.0, 0.0], "a", 0.0).is_err());
    assert!(m.predict_hazard(&[0.0, 0.0], "a", last * 1.01).is_err());
    assert!(m.predict_hazard(&[0.0, 0.0], "zz", 0.5).is_err());
}

#[test]
fn json_round_trip_preserves_predictions() {
    let ped = random_ped(11, 80);
    let m = fit(&ped, &spec(two_penalty_terms())).unwrap();
    let back = FittedModel::from_json(&m.to_json().unwrap()).unwrap();
    assert_eq!(back, m);
    let t = 0.5 * ped.cuts.last();
    assert_eq!(
        back.survival_prob(&[0.2, 0.4], "b", t).unwrap(),
        m.survival_prob(&[0.2, 0.4], "b", t).unwrap()
    );
}

#[test]
fn wald_p_values() {
    assert_eq!(two_sided_p(0.0), 1.0);
    assert!((two_sided_p(1.959964) - 0.05).abs() < 1e-6);
    let (_, m) = intercept_model(12);
    let table = m.coefficient_table();
    assert_eq!(table.len(), 1);
    let row = &table[0];
    assert!((row.se - m.covariance[(0, 0)].sqrt()).abs() < 1e-15);
    assert_eq!(row.z, row.estimate / row.se);
}

#[test]
fn duplicated_column_is_rejected() {
    let ped = random_ped(13, 50);
    let dup = spec(vec![TermSpec::Intercept, linear("x1"), linear("x1")]);
    assert!(build_design(&ped, &dup).is_err());
}
