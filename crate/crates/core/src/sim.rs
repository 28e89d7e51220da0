//! Data-generating processes with group-specific time-varying effects,
//! inversion sampling of survival times, censoring calibration and the
//! four-scenario Monte Carlo harness.

use std::f64::consts::PI;
use std::io::Write;

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::{self, FitError, KnotSpec, ModelSpec, TermSpec};
use crate::fmt::g17;
use crate::metrics::{self, MetricsError};
use crate::ped::{
    self, CutStrategy, PedError, Schema, SurvivalData, SurvivalRecord, TimeConvention,
};

pub const GROUPS: usize = 4;
/// End of follow-up; later event times are administratively censored.
pub const T_MAX: f64 = 0.8;

const A: [f64; GROUPS] = [0.0, 1.0, -1.0, 0.5];
const B: [f64; GROUPS] = [1.5, -1.5, 0.75, 0.0];
const C: [f64; GROUPS] = [0.0, 0.0, 0.0, 1.5];

const QUAD_REL_TOL: f64 = 1e-10;
const QUAD_MAX_DEPTH: usize = 40;
const INVERSION_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("group {0} outside 1..=4")]
    InvalidGroup(usize),
    #[error("hazard is not finite and positive at t = {0}")]
    NonFiniteHazard(f64),
    #[error("inversion did not reach the residual tolerance (residual {0:.3e})")]
    Inversion(f64),
    #[error("could not bracket the censoring rate for target {0}")]
    Bracket(f64),
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Ped(#[from] PedError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scenario {
    I,
    II,
    III,
    IV,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::I, Scenario::II, Scenario::III, Scenario::IV];

    pub fn id(self) -> u64 {
        self as u64 + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::I => "I",
            Scenario::II => "II",
            Scenario::III => "III",
            Scenario::IV => "IV",
        }
    }

    /// Model that matches the structure of this scenario.
    pub fn true_model(self) -> ModelId {
        match self {
            Scenario::I => ModelId::I,
            Scenario::II => ModelId::II,
            Scenario::III => ModelId::III,
            Scenario::IV => ModelId::IV,
        }
    }

    /// Effect `f(x₂, t, g)` of `x₂`, `g ∈ 1..=4`.
    pub fn effect(self, x2: f64, t: f64, g: usize) -> Result<f64, SimError> {
        if !(1..=GROUPS).contains(&g) {
            return Err(SimError::InvalidGroup(g));
        }
        let k = g - 1;
        let curve = |k: usize| A[k] + B[k] * t + C[k] * (PI * t / T_MAX).sin();
        Ok(match self {
            Scenario::I => curve(k) * x2,
            Scenario::III => A[k] * x2,
            Scenario::IV => curve(0) * x2,
            Scenario::II => 0.5 * A[k] * x2 + 0.5 * curve(0) * x2,
        })
    }
}

/// `exp(3t + 3x₁ + f(x₂, t, g))`.
pub fn dgp_hazard(scenario: Scenario, x1: f64, x2: f64, g: usize, t: f64) -> Result<f64, SimError> {
    Ok((3.0 * t + 3.0 * x1 + scenario.effect(x2, t, g)?).exp())
}

fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

/// `∫_a^b h` by adaptive Simpson with interval halving.
pub fn integrate<F: Fn(f64) -> f64>(h: &F, a: f64, b: f64) -> Result<f64, SimError> {
    if b <= a {
        return Ok(0.0);
    }
    let eval = |t: f64| -> Result<f64, SimError> {
        let v = h(t);
        if v.is_finite() && v >= 0.0 {
            Ok(v)
        } else {
            Err(SimError::NonFiniteHazard(t))
        }
    };
    let fa = eval(a)?;
    let fb = eval(b)?;
    let m = 0.5 * (a + b);
    let fm = eval(m)?;
    let whole = simpson(fa, fm, fb, a, b);
    adaptive(&eval, a, b, fa, fm, fb, whole, 0)
}

#[allow(clippy::too_many_arguments)]
fn adaptive<F: Fn(f64) -> Result<f64, SimError>>(
    eval: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    depth: usize,
) -> Result<f64, SimError> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = eval(lm)?;
    let frm = eval(rm)?;
    let left = simpson(fa, flm, fm, a, m);
    let right = simpson(fm, frm, fb, m, b);
    let both = left + right;
    let err = (both - whole).abs();
    if depth >= QUAD_MAX_DEPTH || err <= 15.0 * QUAD_REL_TOL * both.abs().max(f64::MIN_POSITIVE) {
        return Ok(both + (both - whole) / 15.0);
    }
    Ok(adaptive(eval, a, m, fa, flm, fm, left, depth + 1)?
        + adaptive(eval, m, b, fm, frm, fb, right, depth + 1)?)
}

/// One inverted draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    /// `T̂` with `Λ(T̂) = target`, or `t_max` when truncated.
    pub time: f64,
    /// `−log U`.
    pub target: f64,
    /// `Λ(T̂) − target`; zero when truncated.
    pub residual: f64,
    pub truncated: bool,
}

/// Solves `Λ(T) = target` on `[0, t_max]` by bisection, integrating the
/// hazard incrementally between bracket ends.
pub fn invert_cumulative_hazard<F: Fn(f64) -> f64>(
    hazard: F,
    target: f64,
    t_max: f64,
) -> Result<Draw, SimError> {
    let total = integrate(&hazard, 0.0, t_max)?;
    if target > total {
        return Ok(Draw {
            time: t_max,
            target,
            residual: 0.0,
            truncated: true,
        });
    }
    let (mut lo, mut cum_lo) = (0.0, 0.0);
    let (mut hi, mut cum_hi) = (t_max, total);
    loop {
        let mid = 0.5 * (lo + hi);
        let cum_mid = cum_lo + integrate(&hazard, lo, mid)?;
        let residual = cum_mid - target;
        if residual.abs() < INVERSION_TOL {
            return Ok(Draw {
                time: mid,
                target,
                residual,
                truncated: false,
            });
        }
        if mid <= lo || mid >= hi {
            let (t, r) = if (cum_lo - target).abs() < (cum_hi - target).abs() {
                (lo, cum_lo - target)
            } else {
                (hi, cum_hi - target)
            };
            if r.abs() < INVERSION_TOL {
                return Ok(Draw {
                    time: t,
                    target,
                    residual: r,
                    truncated: false,
                });
            }
            return Err(SimError::Inversion(r));
        }
        if residual < 0.0 {
            (lo, cum_lo) = (mid, cum_mid);
        } else {
            (hi, cum_hi) = (mid, cum_mid);
        }
    }
}

/// Draws `T = Λ⁻¹(−log U)` for `U ~ Uniform(0, 1)`.
pub fn sample_survival_time<F: Fn(f64) -> f64, R: Rng + ?Sized>(
    hazard: F,
    rng: &mut R,
    t_max: f64,
) -> Result<Draw, SimError> {
    let u: f64 = rng.sample(Open01);
    invert_cumulative_hazard(hazard, -u.ln(), t_max)
}

/// Covariates and latent times of one simulated subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentSubject {
    pub group: usize,
    pub x1: f64,
    pub x2: f64,
    pub event_time: Draw,
    /// Unit-rate exponential; the censoring time is `e / rate`.
    pub censor_unit: f64,
}

impl LatentSubject {
    /// Observed `(time, event)` under censoring rate `rate`.
    pub fn observe(&self, rate: f64) -> (f64, bool) {
        let c = if rate > 0.0 {
            self.censor_unit / rate
        } else {
            f64::INFINITY
        };
        let t = self.event_time.time;
        if self.event_time.truncated {
            (t.min(c), false)
        } else if t <= c {
            (t, true)
        } else {
            (c, false)
        }
    }
}

fn draw_subject<R: Rng + ?Sized>(
    scenario: Scenario,
    group: usize,
    rng: &mut R,
) -> Result<LatentSubject, SimError> {
    let x1: f64 = rng.random();
    let x2: f64 = rng.random();
    // validates the group once so the closure below cannot fail
    scenario.effect(x2, 0.0, group)?;
    let hazard = |t: f64| dgp_hazard(scenario, x1, x2, group, t).unwrap_or(f64::NAN);
    let event_time = sample_survival_time(hazard, rng, T_MAX)?;
    let e: f64 = rng.sample(Open01);
    Ok(LatentSubject {
        group,
        x1,
        x2,
        event_time,
        censor_unit: -e.ln(),
    })
}

/// Deterministic RNG for `(base seed, scenario, stream index)`.
pub fn stream_rng(base_seed: u64, scenario: Scenario, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream((scenario.id() << 32) | u64::from(index));
    rng
}

/// Stream index reserved for calibration draws.
const CALIBRATION_STREAM: u32 = u32::MAX;
/// Stream index reserved for fresh-sample censoring checks.
const CHECK_STREAM: u32 = u32::MAX - 1;

/// `n` latent subjects in `G` equal-sized group blocks.
pub fn latent_sample<R: Rng + ?Sized>(
    scenario: Scenario,
    n: usize,
    rng: &mut R,
) -> Result<Vec<LatentSubject>, SimError> {
    if n % GROUPS != 0 {
        return Err(SimError::Config(format!(
            "n = {n} is not divisible by {GROUPS}"
        )));
    }
    let per = n / GROUPS;
    (0..n)
        .map(|i| draw_subject(scenario, i / per + 1, rng))
        .collect()
}

pub fn censoring_fraction(subjects: &[LatentSubject], rate: f64) -> f64 {
    subjects.iter().filter(|s| !s.observe(rate).1).count() as f64 / subjects.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub rate: f64,
    /// Censoring fraction on the calibration sample.
    pub realized: f64,
    pub iterations: usize,
}

pub const CALIBRATION_SUBJECTS: usize = 10_000;
const CALIBRATION_TOL: f64 = 0.005;

/// Exponential censoring rate giving `target` censoring on average, by
/// bisection on a fixed Monte Carlo sample (common random numbers).
pub fn calibrate_censoring(
    scenario: Scenario,
    target: f64,
    base_seed: u64,
) -> Result<Calibration, SimError> {
    if !(0.0..1.0).contains(&target) {
        return Err(SimError::Bracket(target));
    }
    let mut rng = stream_rng(base_seed, scenario, CALIBRATION_STREAM);
    let sample = latent_sample(scenario, CALIBRATION_SUBJECTS, &mut rng)?;
    let at = |rate: f64| censoring_fraction(&sample, rate);
    let floor = at(0.0);
    if target <= floor + CALIBRATION_TOL {
        // truncation alone already censors about this much
        if (floor - target).abs() < CALIBRATION_TOL || target == 0.0 {
            return Ok(Calibration {
                rate: 0.0,
                realized: floor,
                iterations: 0,
            });
        }
        return Err(SimError::Bracket(target));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut iterations = 0;
    while at(hi) < target {
        lo = hi;
        hi *= 2.0;
        iterations += 1;
        if iterations > 60 {
            return Err(SimError::Bracket(target));
        }
    }
    for _ in 0..200 {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        let realized = at(mid);
        if (realized - target).abs() < CALIBRATION_TOL {
            return Ok(Calibration {
                rate: mid,
                realized,
                iterations,
            });
        }
        if realized < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(SimError::Bracket(target))
}

/// Censoring fraction on `n` fresh subjects, independent of the calibration
/// sample.
pub fn realized_censoring(
    scenario: Scenario,
    rate: f64,
    n: usize,
    base_seed: u64,
) -> Result<f64, SimError> {
    let mut rng = stream_rng(base_seed, scenario, CHECK_STREAM);
    Ok(censoring_fraction(
        &latent_sample(scenario, n, &mut rng)?,
        rate,
    ))
}

/// Fitted comparison models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelId {
    I,
    II,
    III,
    IV,
}

impl ModelId {
    pub const ALL: [ModelId; 4] = [ModelId::I, ModelId::II, ModelId::III, ModelId::IV];

    pub fn name(self) -> &'static str {
        match self {
            ModelId::I => "i",
            ModelId::II => "ii",
            ModelId::III => "iii",
            ModelId::IV => "iv",
        }
    }

    /// Intercept, baseline smooth and linear `x₁`, plus the `x₂` effect:
    /// (i) functional random coefficient `f_g(t)·x₂`; (ii) group slopes plus
    /// a centered shared `f(t)·x₂`; (iii) group slopes `γ_g·x₂`; (iv) shared
    /// `f(t)·x₂`.
    pub fn spec(self, knots: &KnotSpec) -> ModelSpec {
        let mut terms = vec![
            TermSpec::Intercept,
            TermSpec::Smooth {
                knots: knots.clone(),
                diff_order: 1,
            },
            TermSpec::Linear {
                covariate: "x1".into(),
            },
        ];
        let by = Some("x2".to_string());
        let vc = |centered| TermSpec::VaryingCoefficient {
            by: "x2".into(),
            knots: knots.clone(),
            diff_order: 1,
            centered,
        };
        match self {
            ModelId::I => terms.push(TermSpec::Fre {
                by,
                knots: knots.clone(),
                diff_order: 1,
            }),
            ModelId::II => {
                terms.push(TermSpec::RandomEffect { by });
                terms.push(vc(true));
            }
            ModelId::III => terms.push(TermSpec::RandomEffect { by }),
            ModelId::IV => terms.push(vc(false)),
        }
        ModelSpec::new(terms)
    }

    /// Label of the term carrying the `x₂` effect.
    pub fn effect_label(self) -> &'static str {
        match self {
            ModelId::I => "fre(group,t):x2",
            ModelId::II | ModelId::III => "re(group):x2",
            ModelId::IV => "s(t):x2",
        }
    }
}

fn default_scenarios() -> Vec<Scenario> {
    Scenario::ALL.to_vec()
}
fn default_models() -> Vec<ModelId> {
    ModelId::ALL.to_vec()
}
fn default_sizes() -> Vec<usize> {
    vec![400]
}
fn default_target() -> f64 {
    0.105
}
fn default_reps() -> usize {
    1
}
fn default_seed() -> u64 {
    1
}
fn default_cuts() -> CutStrategy {
    CutStrategy::Equidistant(40)
}
fn default_grid() -> usize {
    metrics::DEFAULT_GRID
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<Scenario>,
    #[serde(default = "default_sizes")]
    pub sample_sizes: Vec<usize>,
    #[serde(default = "default_target")]
    pub censoring_target: f64,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default = "default_seed")]
    pub base_seed: u64,
    #[serde(default = "default_models")]
    pub models: Vec<ModelId>,
    #[serde(default = "default_cuts")]
    pub cuts: CutStrategy,
    #[serde(default)]
    pub knots: KnotSpec,
    /// IBS upper limit; defaults to the largest event time of each dataset.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default = "default_grid")]
    pub grid_size: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            scenarios: default_scenarios(),
            sample_sizes: default_sizes(),
            censoring_target: default_target(),
            replications: default_reps(),
            base_seed: default_seed(),
            models: default_models(),
            cuts: default_cuts(),
            knots: KnotSpec::default(),
            tau: None,
            grid_size: default_grid(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if let Some(&n) = self
            .sample_sizes
            .iter()
            .find(|&&n| n == 0 || n % GROUPS != 0)
        {
            return Err(SimError::Config(format!(
                "sample size {n} must be a positive multiple of {GROUPS}"
            )));
        }
        if !(0.0..1.0).contains(&self.censoring_target) {
            return Err(SimError::Config(
                "censoring target must lie in [0, 1)".into(),
            ));
        }
        if self.replications as u64 >= u64::from(CHECK_STREAM) {
            return Err(SimError::Config("too many replications".into()));
        }
        if self.grid_size < 2 {
            return Err(SimError::Config("grid size must be at least 2".into()));
        }
        Ok(())
    }
}

pub fn schema() -> Schema {
    Schema {
        covariates: vec!["x1".into(), "x2".into()],
        group_name: "group".into(),
        group_levels: (1..=GROUPS).map(|g| g.to_string()).collect(),
    }
}

/// `n` observed records for replication `rep` under censoring rate `rate`;
/// a pure function of `(base seed, scenario, rep, n, rate)`.
pub fn sample_dataset(
    base_seed: u64,
    scenario: Scenario,
    n: usize,
    rep: u32,
    rate: f64,
) -> Result<SurvivalData, SimError> {
    let mut rng = stream_rng(base_seed, scenario, rep);
    let latent = latent_sample(scenario, n, &mut rng)?;
    let records = latent
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (time, event) = s.observe(rate);
            SurvivalRecord {
                id: (i + 1).to_string(),
                time,
                event,
                covariates: vec![s.x1, s.x2],
                group: s.group.to_string(),
            }
        })
        .collect();
    Ok(SurvivalData::new(schema(), records)?)
}

/// One result row per (scenario, n, replication, model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub scenario: Scenario,
    pub n: usize,
    pub rep: usize,
    pub model: ModelId,
    pub loglik: f64,
    pub ibs: f64,
    pub aic: f64,
    pub edf: f64,
    pub converged: bool,
    /// EDF of the term carrying the `x₂` effect.
    pub effect_edf: f64,
    /// Censoring fraction of the replication's dataset.
    pub censoring: f64,
    pub error: Option<String>,
}

/// Fits one model to one dataset and evaluates it in-sample.
pub fn evaluate_model(
    data: &SurvivalData,
    model: ModelId,
    config: &SimConfig,
) -> Result<(fit::FittedModel, metrics::IbsResult), SimError> {
    let cuts = ped::make_cut_points(&data.times(), &config.cuts)?;
    let ped = ped::as_ped(data, &cuts, TimeConvention::End)?;
    let fitted = fit::fit(&ped, &model.spec(&config.knots))?;
    let tau = match config.tau {
        Some(t) => t.min(cuts.last()),
        None => metrics::default_tau(data).ok_or(MetricsError::Empty)?,
    };
    let ibs = metrics::ibs(&fitted, data, tau, config.grid_size)?;
    Ok((fitted, ibs))
}

fn replicate(
    config: &SimConfig,
    scenario: Scenario,
    n: usize,
    rep: usize,
    rate: f64,
) -> Vec<SimRow> {
    let blank = |model, err: String, censoring| SimRow {
        scenario,
        n,
        rep,
        model,
        loglik: f64::NAN,
        ibs: f64::NAN,
        aic: f64::NAN,
        edf: f64::NAN,
        converged: false,
        effect_edf: f64::NAN,
        censoring,
        error: Some(err),
    };
    let data = match sample_dataset(config.base_seed, scenario, n, rep as u32, rate) {
        Ok(d) => d,
        Err(e) => {
            return config
                .models
                .iter()
                .map(|&m| blank(m, e.to_string(), f64::NAN))
                .collect()
        }
    };
    let censoring = data.records.iter().filter(|r| !r.event).count() as f64 / n as f64;
    config
        .models
        .iter()
        .map(|&model| match evaluate_model(&data, model, config) {
            Ok((f, ibs)) => SimRow {
                scenario,
                n,
                rep,
                model,
                loglik: f.loglik,
                ibs: ibs.ibs,
                aic: metrics::aic(&f),
                edf: f.edf_total,
                converged: f.diagnostics.converged,
                effect_edf: f.term_edf(model.effect_label()).unwrap_or(f64::NAN),
                censoring,
                error: None,
            },
            Err(e) => blank(model, e.to_string(), censoring),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResults {
    pub rows: Vec<SimRow>,
    pub calibrations: Vec<(Scenario, Calibration)>,
}

/// Runs every (scenario, n, replication) cell and fits every model.
///
/// Cells run in parallel on the current rayon pool; rows are sorted by key
/// so the table does not depend on scheduling.
pub fn run_scenarios(config: &SimConfig) -> Result<SimResults, SimError> {
    config.validate()?;
    let mut calibrations = Vec::new();
    for &s in &config.scenarios {
        calibrations.push((
            s,
            calibrate_censoring(s, config.censoring_target, config.base_seed)?,
        ));
    }
    let mut cells = Vec::new();
    for &(s, cal) in &calibrations {
        for &n in &config.sample_sizes {
            for rep in 0..config.replications {
                cells.push((s, n, rep, cal.rate));
            }
        }
    }
    let mut rows: Vec<SimRow> = cells
        .par_iter()
        .flat_map_iter(|&(s, n, rep, rate)| replicate(config, s, n, rep, rate))
        .collect();
    rows.sort_by_key(|r| (r.scenario, r.n, r.rep, r.model));
    Ok(SimResults { rows, calibrations })
}

/// Writes `scenario,n,rep,model,loglik,ibs,aic,edf,converged` rows.
pub fn write_results<W: Write>(writer: W, rows: &[SimRow]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "scenario",
        "n",
        "rep",
        "model",
        "loglik",
        "ibs",
        "aic",
        "edf",
        "converged",
    ])?;
    for r in rows {
        w.write_record([
            r.scenario.name().to_string(),
            r.n.to_string(),
            r.rep.to_string(),
            r.model.name().to_string(),
            g17(r.loglik),
            g17(r.ibs),
            g17(r.aic),
            g17(r.edf),
            r.converged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
