use std::collections::BTreeMap;
use std::path::PathBuf;

use pamm::fit::ModelSpec;
use pamm::ped::{CutStrategy, TimeConvention};
use pamm::sim::SimConfig;
use serde::{Deserialize, Serialize};

/// Maps input CSV columns onto the survival record fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    #[serde(default)]
    pub id: Option<String>,
    pub time: String,
    pub event: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PedConfig {
    pub input: PathBuf,
    pub columns: ColumnMap,
    /// Declared group levels; the first is the reference. Defaults to order
    /// of first appearance.
    #[serde(default)]
    pub group_levels: Option<Vec<String>>,
    /// Text-valued covariates, coded by position in the given level list.
    #[serde(default)]
    pub categorical: BTreeMap<String, Vec<String>>,
    /// Labels of the event column read as an event; defaults to `1`/`true`.
    #[serde(default)]
    pub event_values: Option<Vec<String>>,
    #[serde(default = "unique_times")]
    pub cuts: CutStrategy,
    #[serde(default)]
    pub t_convention: TimeConvention,
    #[serde(default)]
    pub admin_horizon: Option<f64>,
    /// Replacement for zero times (same-day events); `null` rejects them.
    /// Negative times are always rejected.
    #[serde(default = "half_unit")]
    pub same_day_time: Option<f64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn half_unit() -> Option<f64> {
    Some(0.5)
}

fn unique_times() -> CutStrategy {
    CutStrategy::UniqueTimes
}

fn curve_grid() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub ped: PathBuf,
    pub model: ModelSpec,
    #[serde(default)]
    pub group_levels: Option<Vec<String>>,
    #[serde(default = "curve_grid")]
    pub curve_grid: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub model: PathBuf,
    pub ped: PathBuf,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default = "curve_grid")]
    pub grid_size: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    #[serde(flatten)]
    pub sim: SimConfig,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}
