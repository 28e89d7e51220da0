mod common;

use common::{knots, random_data, spec, survival_loglik_oracle};
use pamm::fit::{fit, fit_fixed, FittedModel, TermSpec};
use pamm::metrics::{
    aic, brier_from_predictions, censoring_km, ibs, kaplan_meier, model_loglik, offset_constant,
    survival_loglik,
};
use pamm::ped::{as_ped, make_cut_points, CutStrategy, PedDataset, SurvivalData, TimeConvention};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ped_of(data: &SurvivalData, j: usize) -> PedDataset {
    let cuts = make_cut_points(&data.times(), &CutStrategy::Equidistant(j)).unwrap();
    as_ped(data, &cuts, TimeConvention::End).unwrap()
}

fn terms() -> Vec<TermSpec> {
    vec![
        TermSpec::Intercept,
        TermSpec::Linear {
            covariate: "x1".into(),
        },
        TermSpec::Smooth {
            knots: knots(4),
            diff_order: 1,
        },
        TermSpec::Fre {
            by: Some("x2".into()),
            knots: knots(3),
            diff_order: 1,
        },
    ]
}

fn fitted(seed: u64, n: usize) -> (SurvivalData, PedDataset, FittedModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = random_data(&mut rng, n);
    let ped = ped_of(&data, 12);
    let m = fit(&ped, &spec(terms())).unwrap();
    (data, ped, m)
}

#[test]
fn poisson_and_survival_likelihoods_agree() {
    for seed in 0..3 {
        let (data, ped, m) = fitted(seed, 90);
        let poisson = model_loglik(&m, &ped).unwrap();
        assert!((poisson - m.loglik).abs() < 1e-9);
        let oracle = survival_loglik_oracle(&m, &data);
        assert!((poisson - offset_constant(&ped) - oracle).abs() < 1e-10);
        let curves = m.survival_curves(&data.records).unwrap();
        assert!((survival_loglik(&curves, &data).unwrap() - oracle).abs() < 1e-10);
    }
}

/// Product-limit estimate of the censoring survivor at `s`, or its left
/// limit when `strict`, by direct counting.
fn censoring_km_brute(times: &[f64], events: &[bool], s: f64, strict: bool) -> f64 {
    let mut jumps: Vec<f64> = times
        .iter()
        .zip(events)
        .filter(|(_, &e)| !e)
        .map(|(&t, _)| t)
        .collect();
    jumps.sort_by(f64::total_cmp);
    jumps.dedup();
    jumps
        .into_iter()
        .filter(|&u| if strict { u < s } else { u <= s })
        .map(|u| {
            let at_risk = times.iter().filter(|&&t| t >= u).count() as f64;
            let censored = times
                .iter()
                .zip(events)
                .filter(|(&t, &e)| t == u && !e)
                .count() as f64;
            1.0 - censored / at_risk
        })
        .product()
}

#[test]
fn brier_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let n = rng.random_range(5..40);
        let times: Vec<f64> = (0..n)
            .map(|_| (rng.random_range(1..20) as f64) * 0.25)
            .collect();
        let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let surv: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let t = rng.random_range(0.0..5.0);
        let g = censoring_km(&times, &events).unwrap();
        let got = brier_from_predictions(&surv, &times, &events, t, &g);
        let mut sum = 0.0;
        for i in 0..n {
            if times[i] <= t && events[i] {
                let w = censoring_km_brute(&times, &events, times[i], true);
                if w > 0.0 {
                    sum += surv[i].powi(2) / w;
                }
            } else if times[i] > t {
                let w = censoring_km_brute(&times, &events, t, false);
                if w > 0.0 {
                    sum += (1.0 - surv[i]).powi(2) / w;
                }
            }
        }
        assert!((got.score - sum / n as f64).abs() < 1e-12);
    }
}

#[test]
fn brier_and_ibs_stay_in_unit_interval() {
    let (data, _, m) = fitted(7, 100);
    let tau = data
        .records
        .iter()
        .filter(|r| r.event)
        .map(|r| r.time)
        .fold(0.0, f64::max);
    let res = ibs(&m, &data, tau, 200).unwrap();
    assert!((0.0..=1.0).contains(&res.ibs));
    assert!(res.curve.iter().all(|b| (0.0..=1.0).contains(&b.score)));
}

#[test]
fn ibs_grid_refinement_is_stable() {
    let (data, _, m) = fitted(8, 150);
    let tau = 0.8 * m.cuts.last();
    let coarse = ibs(&m, &data, tau, 100).unwrap().ibs;
    let fine = ibs(&m, &data, tau, 1000).unwrap().ibs;
    assert!((coarse - fine).abs() < 1e-3, "{coarse} vs {fine}");
}

#[test]
fn aic_ordering_survives_time_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data = random_data(&mut rng, 80);
    let mut scaled = data.clone();
    for r in &mut scaled.records {
        r.time *= 10.0;
    }
    let small = spec(vec![
        TermSpec::Intercept,
        TermSpec::Linear {
            covariate: "x1".into(),
        },
    ]);
    let big = spec(terms());
    let diff = |d: &SurvivalData| {
        let ped = ped_of(d, 12);
        let a = fit_fixed(&ped, &small, &[]).unwrap();
        let b = fit_fixed(&ped, &big, &[2.0, 5.0, 1.0]).unwrap();
        aic(&b) - aic(&a)
    };
    assert!((diff(&data) - diff(&scaled)).abs() < 1e-6);
}

proptest! {
    #[test]
    fn km_without_censoring_is_empirical_survival(times in prop::collection::vec(1u32..30, 1..40), probe in 0u32..32) {
        let t: Vec<f64> = times.iter().map(|&x| f64::from(x)).collect();
        let km = kaplan_meier(&t, &vec![true; t.len()]).unwrap();
        let s = f64::from(probe);
        let empirical = t.iter().filter(|&&x| x > s).count() as f64 / t.len() as f64;
        prop_assert!((km.eval(s) - empirical).abs() < 1e-12);
    }
}
