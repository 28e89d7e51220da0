//! `pamm` command-line tool: PED transformation, fitting, evaluation and the
//! simulation harness. Each subcommand reads one JSON config; relative paths
//! inside it resolve against the config file's directory.

mod config;
mod ingest;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use pamm::basis::TermKind;
use pamm::fit::{self, FitError, FittedModel};
use pamm::fmt::g17;
use pamm::metrics::{self, MetricsError};
use pamm::ped::{self, PedDataset, PedError};
use pamm::sim::{self, SimError};
use serde::de::DeserializeOwned;

use config::{EvaluateConfig, FitConfig, PedConfig, SimulateConfig};
use manifest::Manifest;

#[derive(Parser)]
#[command(
    name = "pamm",
    version,
    about = "Piecewise exponential additive mixed models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config for this subcommand.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed (overrides the config; used by `simulate`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (overrides the config; used by `simulate`).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Transform a survival CSV into PED rows.
    Ped(Common),
    /// Fit a model to a PED CSV.
    Fit(Common),
    /// Evaluate a fitted model on a PED CSV.
    Evaluate(Common),
    /// Run the simulation harness.
    Simulate(Common),
}

/// Failure classes mapped to exit codes 2 and 3.
enum Failure {
    Config(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Numeric(e) => e,
        }
    }
}

type Outcome<T> = Result<T, Failure>;

fn config_err<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Config(e.into())
}

fn io_err(e: anyhow::Error) -> Failure {
    Failure::Config(e)
}

fn fit_failure(e: FitError) -> Failure {
    match e {
        FitError::RankDeficient { .. }
        | FitError::NonConvergence { .. }
        | FitError::StepHalving
        | FitError::Singular
        | FitError::NonFinite(_)
        | FitError::AllStartsFailed => Failure::Numeric(anyhow!(e)),
        other => Failure::Config(anyhow!(other)),
    }
}

fn metrics_failure(e: MetricsError) -> Failure {
    match e {
        MetricsError::Fit(f) => fit_failure(f),
        other => Failure::Config(anyhow!(other)),
    }
}

fn sim_failure(e: SimError) -> Failure {
    match e {
        SimError::Fit(f) => fit_failure(f),
        SimError::Config(_)
        | SimError::Io(_)
        | SimError::Csv(_)
        | SimError::Ped(_)
        | SimError::InvalidGroup(_) => Failure::Config(anyhow!(e)),
        other => Failure::Numeric(anyhow!(other)),
    }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Outcome<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(io_err)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .map_err(config_err)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn config_dir(common: &Common) -> PathBuf {
    common
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

/// Output directory from the flag, else the config; created if missing.
fn out_dir(common: &Common, from_config: &Option<PathBuf>) -> Outcome<PathBuf> {
    let dir = match (&common.out, from_config) {
        (Some(flag), _) => flag.clone(),
        (None, Some(p)) => resolve(&config_dir(common), p),
        (None, None) => {
            return Err(config_err(anyhow!(
                "no output directory: set \"out\" or pass --out"
            )))
        }
    };
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(io_err)?;
    Ok(dir)
}

fn read_ped(path: &Path, levels: Option<&[String]>) -> Outcome<PedDataset> {
    let file = fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(io_err)?;
    PedDataset::read_csv(file, levels).map_err(|e: PedError| {
        config_err(anyhow!(e).context(format!("reading {}", path.display())))
    })
}

fn cmd_ped(common: &Common) -> Outcome<()> {
    let mut cfg: PedConfig = read_config(&common.config)?;
    let hashed = PedConfig {
        out: None,
        ..cfg.clone()
    };
    let base = config_dir(common);
    cfg.input = resolve(&base, &cfg.input);
    let out = out_dir(common, &cfg.out)?;
    let file = fs::File::open(&cfg.input)
        .with_context(|| format!("opening {}", cfg.input.display()))
        .map_err(io_err)?;
    let mut ing = ingest::read_records(file, &cfg).map_err(config_err)?;
    if let Some(h) = cfg.admin_horizon {
        if !(h > 0.0) {
            return Err(config_err(anyhow!("admin_horizon must be positive")));
        }
        ped::administratively_censor(&mut ing.data.records, h);
    }
    let cuts = ped::make_cut_points(&ing.data.times(), &cfg.cuts).map_err(config_err)?;
    let peds = ped::as_ped(&ing.data, &cuts, cfg.t_convention).map_err(config_err)?;
    let mut buf = Vec::new();
    peds.write_csv(&mut buf).map_err(config_err)?;

    let mut m = Manifest::new("ped", &hashed).map_err(config_err)?;
    m.input("input", &cfg.input).map_err(io_err)?;
    m.output(&out, "ped.csv", &buf).map_err(io_err)?;
    let events = ing.data.records.iter().filter(|r| r.event).count();
    m.note("subjects", ing.data.records.len())
        .map_err(config_err)?;
    m.note("events", events).map_err(config_err)?;
    m.note("dropped_missing", ing.dropped_missing)
        .map_err(config_err)?;
    m.note("same_day_repaired", ing.repaired)
        .map_err(config_err)?;
    m.note("group_levels", &ing.data.schema.group_levels)
        .map_err(config_err)?;
    m.write(&out).map_err(io_err)?;
    if ing.dropped_missing > 0 {
        eprintln!("dropped {} rows with missing values", ing.dropped_missing);
    }
    eprintln!(
        "{} subjects, {} events, {} PED rows",
        ing.data.records.len(),
        events,
        peds.rows.len()
    );
    Ok(())
}

fn coefficient_csv(model: &FittedModel) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["term", "estimate", "se", "z", "p_value"])?;
    for r in model.coefficient_table() {
        w.write_record([r.term, g17(r.estimate), g17(r.se), g17(r.z), g17(r.p_value)])?;
    }
    Ok(w.into_inner()?)
}

fn grid(range: (f64, f64), n: usize) -> Vec<f64> {
    let (a, b) = range;
    (0..n)
        .map(|i| {
            if i + 1 == n {
                b
            } else {
                a + (b - a) * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

fn curve_csv(
    points: &[fit::CurvePoint],
    with_group: bool,
    group_label: Option<&str>,
) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t", "estimate", "lower", "upper"];
    if with_group {
        header.insert(0, "group");
    }
    w.write_record(&header)?;
    for p in points {
        let mut rec = vec![
            g17(p.t),
            g17(p.estimate),
            g17(p.estimate - 2.0 * p.se),
            g17(p.estimate + 2.0 * p.se),
        ];
        if with_group {
            rec.insert(0, group_label.map_or_else(|| p.group.clone(), String::from));
        }
        w.write_record(&rec)?;
    }
    Ok(w.into_inner()?)
}

fn cmd_fit(common: &Common) -> Outcome<()> {
    let mut cfg: FitConfig = read_config(&common.config)?;
    let hashed = FitConfig {
        out: None,
        ..cfg.clone()
    };
    cfg.ped = resolve(&config_dir(common), &cfg.ped);
    let out = out_dir(common, &cfg.out)?;
    if cfg.curve_grid < 2 {
        return Err(config_err(anyhow!("curve_grid must be at least 2")));
    }
    let peds = read_ped(&cfg.ped, cfg.group_levels.as_deref())?;
    let mut spec = cfg.model.clone();
    spec.t_convention = peds.convention;
    let model = fit::fit(&peds, &spec).map_err(fit_failure)?;

    let mut m = Manifest::new("fit", &hashed).map_err(config_err)?;
    m.input("ped", &cfg.ped).map_err(io_err)?;
    let json = model.to_json().map_err(fit_failure)?;
    m.output(&out, "model.json", json.as_bytes())
        .map_err(io_err)?;
    m.output(
        &out,
        "coefficients.csv",
        &coefficient_csv(&model).map_err(io_err)?,
    )
    .map_err(io_err)?;

    let levels = model.schema.group_levels.clone();
    let curve_term = model
        .find_term(TermKind::Fre)
        .or_else(|| model.find_term(TermKind::VaryingCoefficient));
    if let Some(term) = curve_term {
        let range = model.term_range(term).expect("spline term has a range");
        let per_group = model.terms[term].kind == TermKind::Fre;
        let groups = if per_group {
            levels.clone()
        } else {
            vec![levels[0].clone()]
        };
        let pts = model
            .term_curve(term, &groups, &grid(range, cfg.curve_grid))
            .map_err(fit_failure)?;
        let label = (!per_group).then_some("all");
        m.output(
            &out,
            "curves.csv",
            &curve_csv(&pts, true, label).map_err(io_err)?,
        )
        .map_err(io_err)?;
    }
    if let Some(term) = model.find_term(TermKind::Smooth) {
        let range = model.term_range(term).expect("spline term has a range");
        let pts = model
            .term_curve(term, &levels[..1], &grid(range, cfg.curve_grid))
            .map_err(fit_failure)?;
        m.output(
            &out,
            "baseline.csv",
            &curve_csv(&pts, false, None).map_err(io_err)?,
        )
        .map_err(io_err)?;
    }
    m.note("loglik", model.loglik).map_err(config_err)?;
    m.note("edf", model.edf_total).map_err(config_err)?;
    m.note("aic", metrics::aic(&model)).map_err(config_err)?;
    m.note("lambdas", &model.lambdas).map_err(config_err)?;
    m.write(&out).map_err(io_err)?;
    eprintln!(
        "loglik {:.4}, edf {:.3}, AIC {:.3}, {} REML evaluations",
        model.loglik,
        model.edf_total,
        metrics::aic(&model),
        model.diagnostics.reml_evaluations
    );
    Ok(())
}

fn cmd_evaluate(common: &Common) -> Outcome<()> {
    let mut cfg: EvaluateConfig = read_config(&common.config)?;
    let hashed = EvaluateConfig {
        out: None,
        ..cfg.clone()
    };
    let base = config_dir(common);
    cfg.model = resolve(&base, &cfg.model);
    cfg.ped = resolve(&base, &cfg.ped);
    let out = out_dir(common, &cfg.out)?;
    let text = fs::read_to_string(&cfg.model)
        .with_context(|| format!("reading {}", cfg.model.display()))
        .map_err(io_err)?;
    let model = FittedModel::from_json(&text).map_err(config_err)?;
    let peds = read_ped(&cfg.ped, Some(&model.schema.group_levels))?;
    if peds.schema.covariates != model.schema.covariates {
        return Err(config_err(anyhow!(
            "schema mismatch: data has covariates {:?}, model expects {:?}",
            peds.schema.covariates,
            model.schema.covariates
        )));
    }
    if peds.convention != model.convention() {
        return Err(config_err(anyhow!(FitError::ConventionMismatch)));
    }
    let report =
        metrics::fit_report(&model, &peds, cfg.tau, cfg.grid_size).map_err(metrics_failure)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["loglik", "edf", "aic", "ibs"])
        .map_err(config_err)?;
    w.write_record([
        g17(report.loglik),
        g17(report.edf),
        g17(report.aic),
        g17(report.ibs),
    ])
    .map_err(config_err)?;
    let bytes = w
        .into_inner()
        .map_err(|e| config_err(anyhow!(e.to_string())))?;
    let mut b = csv::Writer::from_writer(Vec::new());
    b.write_record(["t", "brier"]).map_err(config_err)?;
    for (t, s) in &report.brier {
        b.write_record([g17(*t), g17(*s)]).map_err(config_err)?;
    }
    let brier = b
        .into_inner()
        .map_err(|e| config_err(anyhow!(e.to_string())))?;

    let mut m = Manifest::new("evaluate", &hashed).map_err(config_err)?;
    m.input("model", &cfg.model).map_err(io_err)?;
    m.input("ped", &cfg.ped).map_err(io_err)?;
    m.output(&out, "report.csv", &bytes).map_err(io_err)?;
    m.output(&out, "brier.csv", &brier).map_err(io_err)?;
    m.write(&out).map_err(io_err)?;
    eprintln!(
        "loglik {:.4}, edf {:.3}, AIC {:.3}, IBS {:.5}",
        report.loglik, report.edf, report.aic, report.ibs
    );
    Ok(())
}

fn cmd_simulate(common: &Common) -> Outcome<()> {
    let mut cfg: SimulateConfig = read_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.sim.base_seed = seed;
    }
    if let Some(t) = common.threads {
        cfg.threads = Some(t);
    }
    let out = out_dir(common, &cfg.out)?;
    cfg.sim.validate().map_err(sim_failure)?;
    let run = || sim::run_scenarios(&cfg.sim);
    let results = match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(config_err)?
            .install(run),
        None => run(),
    }
    .map_err(sim_failure)?;

    let mut buf = Vec::new();
    sim::write_results(&mut buf, &results.rows).map_err(sim_failure)?;
    let mut cal = csv::Writer::from_writer(Vec::new());
    cal.write_record(["scenario", "censoring_rate", "calibration_censoring"])
        .map_err(config_err)?;
    for (s, c) in &results.calibrations {
        cal.write_record([s.name().to_string(), g17(c.rate), g17(c.realized)])
            .map_err(config_err)?;
    }
    let cal = cal
        .into_inner()
        .map_err(|e| config_err(anyhow!(e.to_string())))?;

    let mut m = Manifest::new("simulate", &cfg.sim).map_err(config_err)?;
    m.output(&out, "results.csv", &buf).map_err(io_err)?;
    m.output(&out, "calibration.csv", &cal).map_err(io_err)?;
    let failures: Vec<String> = results
        .rows
        .iter()
        .filter_map(|r| {
            r.error.as_ref().map(|e| {
                format!(
                    "{} n={} rep={} model {}: {e}",
                    r.scenario.name(),
                    r.n,
                    r.rep,
                    r.model.name()
                )
            })
        })
        .collect();
    m.note("failed_fits", &failures).map_err(config_err)?;
    m.write(&out).map_err(io_err)?;
    eprintln!(
        "{} result rows, {} failed fits",
        results.rows.len(),
        failures.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ped(c) => cmd_ped(c),
        Command::Fit(c) => cmd_fit(c),
        Command::Evaluate(c) => cmd_evaluate(c),
        Command::Simulate(c) => cmd_simulate(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
