//! Reads a clinical-style CSV into survival records through a column map.

use std::io::Read;

use anyhow::{anyhow, bail, Context, Result};
use pamm::ped::{Schema, SurvivalData, SurvivalRecord};

use crate::config::PedConfig;

#[derive(Debug)]
pub struct Ingested {
    pub data: SurvivalData,
    /// Rows skipped because a mapped field was empty or `NA`.
    pub dropped_missing: usize,
    pub repaired: usize,
}

fn is_missing(s: &str) -> bool {
    matches!(
        s.trim(),
        "" | "NA" | "na" | "NaN" | "nan" | "null" | "NULL" | "."
    )
}

pub fn read_records<R: Read>(reader: R, cfg: &PedConfig) -> Result<Ingested> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers().context("reading CSV header")?.clone();
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("column {name:?} not found in input"))
    };
    let map = &cfg.columns;
    let id_col = map.id.as_deref().map(find).transpose()?;
    let time_col = find(&map.time)?;
    let event_col = find(&map.event)?;
    let group_col = find(&map.group)?;
    let cov_cols = map
        .covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    for name in cfg.categorical.keys() {
        if !map.covariates.contains(name) {
            bail!("categorical column {name:?} is not a mapped covariate");
        }
    }
    let event_values: Vec<String> = cfg
        .event_values
        .clone()
        .unwrap_or_else(|| vec!["1".into(), "true".into(), "TRUE".into()]);

    let mut records = Vec::new();
    let mut dropped_missing = 0;
    let mut repaired = 0;
    let mut levels: Vec<String> = cfg.group_levels.clone().unwrap_or_default();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("reading CSV row {}", line + 2))?;
        let mapped = std::iter::once(time_col)
            .chain([event_col, group_col])
            .chain(cov_cols.iter().copied())
            .chain(id_col);
        if mapped
            .into_iter()
            .any(|c| rec.get(c).is_none_or(is_missing))
        {
            dropped_missing += 1;
            continue;
        }
        let id = id_col.map_or_else(|| (line + 1).to_string(), |c| rec[c].to_string());
        let mut time: f64 = rec[time_col]
            .trim()
            .parse()
            .map_err(|_| anyhow!("row {id}: non-numeric time {:?}", &rec[time_col]))?;
        if !time.is_finite() {
            bail!("row {id}: non-finite time");
        }
        if time < 0.0 {
            bail!("row {id}: negative time {time}");
        }
        if time == 0.0 {
            match cfg.same_day_time {
                Some(v) if v > 0.0 => {
                    time = v;
                    repaired += 1;
                }
                _ => bail!("row {id}: zero time; set same_day_time to a positive replacement"),
            }
        }
        let event_raw = rec[event_col].trim();
        let event = if event_values.iter().any(|v| v == event_raw) {
            true
        } else if matches!(event_raw, "0" | "false" | "FALSE") || cfg.event_values.is_some() {
            false
        } else {
            bail!("row {id}: unrecognized event value {event_raw:?}");
        };
        let mut covariates = Vec::with_capacity(cov_cols.len());
        for (name, &c) in map.covariates.iter().zip(&cov_cols) {
            let raw = rec[c].trim();
            let v =
                match cfg.categorical.get(name) {
                    Some(lv) => lv.iter().position(|l| l == raw).ok_or_else(|| {
                        anyhow!("row {id}: level {raw:?} of {name:?} is not declared")
                    })? as f64,
                    None => raw
                        .parse()
                        .map_err(|_| anyhow!("row {id}: non-numeric {name} value {raw:?}"))?,
                };
            covariates.push(v);
        }
        let group = rec[group_col].trim().to_string();
        if !levels.contains(&group) {
            if cfg.group_levels.is_some() {
                bail!("row {id}: group {group:?} is not a declared level");
            }
            levels.push(group.clone());
        }
        records.push(SurvivalRecord {
            id,
            time,
            event,
            covariates,
            group,
        });
    }
    if records.is_empty() {
        bail!("no complete rows in input");
    }
    let schema = Schema {
        covariates: map.covariates.clone(),
        group_name: map.group.clone(),
        group_levels: levels,
    };
    let data = SurvivalData::new(schema, records)?;
    Ok(Ingested {
        data,
        dropped_missing,
        repaired,
    })
}
