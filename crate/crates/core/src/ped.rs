//! Right-censored survival records and their piecewise exponential data (PED)
//! representation.
//!
//! Each subject is split into one row per interval `(κ_{j-1}, κ_j]` it was at
//! risk in. A row carries the time at risk within the interval, its log as the
//! Poisson offset, and an event indicator that is 1 only in the interval that
//! contains an observed event.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmt::g17;

#[derive(Debug, Error)]
pub enum PedError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("cut points must be finite and strictly increasing (position {0})")]
    NotIncreasing(usize),
    #[error("cut points must start at a non-negative value")]
    NegativeCut,
    #[error("cut points need at least one interval")]
    TooFewCuts,
    #[error("last cut point {last} is below the largest observed time {max_time}")]
    CutsTooShort { last: f64, max_time: f64 },
    #[error("equidistant partition needs at least one interval")]
    ZeroIntervals,
    #[error("subject {id}: observed time {time} must be positive and finite")]
    NonPositiveTime { id: String, time: f64 },
    #[error("subject {id}: observed time {time} exceeds the last cut point {last}")]
    BeyondLastCut { id: String, time: f64, last: f64 },
    #[error("subject {id}: expected {expected} covariate values, found {found}")]
    CovariateCount {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("subject {id}: group label {label:?} is not a declared level")]
    UnknownGroup { id: String, label: String },
    #[error("malformed PED file: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Names of the covariates carried by every record plus the grouping factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub covariates: Vec<String>,
    pub group_name: String,
    /// Declared group levels. Order matters: the first level is the reference
    /// category of factor terms built on the group.
    pub group_levels: Vec<String>,
}

impl Schema {
    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c == name)
    }

    pub fn group_index(&self, label: &str) -> Option<usize> {
        self.group_levels.iter().position(|g| g == label)
    }
}

/// One subject: observed time `min(T, C)`, event flag, covariates in schema
/// order and a group label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub id: String,
    pub time: f64,
    pub event: bool,
    pub covariates: Vec<f64>,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalData {
    pub schema: Schema,
    pub records: Vec<SurvivalRecord>,
}

impl SurvivalData {
    pub fn new(schema: Schema, records: Vec<SurvivalRecord>) -> Result<Self, PedError> {
        let data = Self { schema, records };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<(), PedError> {
        for r in &self.records {
            if !(r.time > 0.0 && r.time.is_finite()) {
                return Err(PedError::NonPositiveTime {
                    id: r.id.clone(),
                    time: r.time,
                });
            }
            if r.covariates.len() != self.schema.covariates.len() {
                return Err(PedError::CovariateCount {
                    id: r.id.clone(),
                    expected: self.schema.covariates.len(),
                    found: r.covariates.len(),
                });
            }
            if self.schema.group_index(&r.group).is_none() {
                return Err(PedError::UnknownGroup {
                    id: r.id.clone(),
                    label: r.group.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn max_time(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.time)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.time).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.event).collect()
    }
}

/// Truncates follow-up at `horizon`: later times become `horizon` and lose
/// their event flag.
pub fn administratively_censor(records: &mut [SurvivalRecord], horizon: f64) {
    for r in records.iter_mut() {
        if r.time > horizon {
            r.time = horizon;
            r.event = false;
        }
    }
}

/// Strictly increasing interval boundaries `κ_0 = 0 < κ_1 < … < κ_J`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CutPoints(Vec<f64>);

impl CutPoints {
    /// Validates a boundary sequence. A sequence starting above zero gets `0`
    /// prepended.
    pub fn new(mut kappas: Vec<f64>) -> Result<Self, PedError> {
        match kappas.first() {
            None => return Err(PedError::TooFewCuts),
            Some(&k) if !(k >= 0.0) => return Err(PedError::NegativeCut),
            Some(&k) if k > 0.0 => kappas.insert(0, 0.0),
            _ => {}
        }
        if kappas.len() < 2 {
            return Err(PedError::TooFewCuts);
        }
        for (i, w) in kappas.windows(2).enumerate() {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(PedError::NotIncreasing(i + 1));
            }
        }
        Ok(Self(kappas))
    }

    pub fn kappas(&self) -> &[f64] {
        &self.0
    }

    pub fn n_intervals(&self) -> usize {
        self.0.len() - 1
    }

    pub fn last(&self) -> f64 {
        *self.0.last().expect("non-empty")
    }

    /// 1-based index `j` of the interval `(κ_{j-1}, κ_j]` containing `t`.
    pub fn interval_of(&self, t: f64) -> Option<usize> {
        if !(t > 0.0) || t > self.last() {
            return None;
        }
        // first κ_j with κ_j >= t
        Some(self.0.partition_point(|&k| k < t))
    }

    /// Representative time of interval `j` (1-based).
    pub fn t_rep(&self, j: usize, convention: TimeConvention) -> f64 {
        match convention {
            TimeConvention::End => self.0[j],
            TimeConvention::Mid => 0.5 * (self.0[j - 1] + self.0[j]),
        }
    }
}

impl TryFrom<Vec<f64>> for CutPoints {
    type Error = PedError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        CutPoints::new(v)
    }
}

impl From<CutPoints> for Vec<f64> {
    fn from(c: CutPoints) -> Self {
        c.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "strategy", content = "value")]
pub enum CutStrategy {
    /// `{0} ∪` sorted unique observed times.
    UniqueTimes,
    Explicit(Vec<f64>),
    /// `J` equal-width intervals on `[0, max time]`.
    Equidistant(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeConvention {
    #[default]
    End,
    Mid,
}

pub fn make_cut_points(times: &[f64], strategy: &CutStrategy) -> Result<CutPoints, PedError> {
    if times.is_empty() {
        return Err(PedError::EmptyDataset);
    }
    let max_time = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cuts = match strategy {
        CutStrategy::UniqueTimes => {
            let mut t: Vec<f64> = times.to_vec();
            t.sort_by(f64::total_cmp);
            t.dedup();
            let mut k = Vec::with_capacity(t.len() + 1);
            k.push(0.0);
            k.extend(t.into_iter().filter(|&x| x > 0.0));
            CutPoints::new(k)?
        }
        CutStrategy::Explicit(k) => CutPoints::new(k.clone())?,
        CutStrategy::Equidistant(j) => {
            if *j == 0 {
                return Err(PedError::ZeroIntervals);
            }
            let width = max_time / *j as f64;
            let mut k: Vec<f64> = (0..=*j).map(|i| i as f64 * width).collect();
            k[*j] = max_time;
            CutPoints::new(k)?
        }
    };
    if cuts.last() < max_time {
        return Err(PedError::CutsTooShort {
            last: cuts.last(),
            max_time,
        });
    }
    Ok(cuts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedRow {
    pub id: String,
    /// 1-based interval index.
    pub interval: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub t_rep: f64,
    pub exposure: f64,
    pub offset: f64,
    pub delta: u8,
    pub covariates: Vec<f64>,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PedDataset {
    pub rows: Vec<PedRow>,
    pub cuts: CutPoints,
    pub schema: Schema,
    pub convention: TimeConvention,
}

/// Rows of one subject with positive exposure, in interval order.
pub fn subject_rows(
    record: &SurvivalRecord,
    cuts: &CutPoints,
    convention: TimeConvention,
) -> Result<Vec<PedRow>, PedError> {
    let t = record.time;
    if !(t > 0.0 && t.is_finite()) {
        return Err(PedError::NonPositiveTime {
            id: record.id.clone(),
            time: t,
        });
    }
    if t > cuts.last() {
        return Err(PedError::BeyondLastCut {
            id: record.id.clone(),
            time: t,
            last: cuts.last(),
        });
    }
    let k = cuts.kappas();
    let mut rows = Vec::new();
    for j in 1..k.len() {
        let start = k[j - 1];
        if t <= start {
            break;
        }
        let end = k[j];
        let exposure = t.min(end) - start;
        let delta = u8::from(record.event && t <= end);
        rows.push(PedRow {
            id: record.id.clone(),
            interval: j,
            t_start: start,
            t_end: end,
            t_rep: cuts.t_rep(j, convention),
            exposure,
            offset: exposure.ln(),
            delta,
            covariates: record.covariates.clone(),
            group: record.group.clone(),
        });
    }
    Ok(rows)
}

pub fn as_ped(
    data: &SurvivalData,
    cuts: &CutPoints,
    convention: TimeConvention,
) -> Result<PedDataset, PedError> {
    let mut rows = Vec::new();
    for r in &data.records {
        rows.extend(subject_rows(r, cuts, convention)?);
    }
    Ok(PedDataset {
        rows,
        cuts: cuts.clone(),
        schema: data.schema.clone(),
        convention,
    })
}

impl PedDataset {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Recovers one record per subject: time is the last row's start plus its
    /// exposure, the event flag is the last row's indicator. Subject order is
    /// the order of first appearance.
    pub fn subjects(&self) -> Vec<SurvivalRecord> {
        let mut out: Vec<SurvivalRecord> = Vec::new();
        let mut last_id: Option<&str> = None;
        for row in &self.rows {
            let rec = SurvivalRecord {
                id: row.id.clone(),
                time: row.t_start + row.exposure,
                event: row.delta == 1,
                covariates: row.covariates.clone(),
                group: row.group.clone(),
            };
            if last_id == Some(row.id.as_str()) {
                *out.last_mut().expect("non-empty") = rec;
            } else {
                out.push(rec);
            }
            last_id = Some(row.id.as_str());
        }
        out
    }

    pub fn subject_data(&self) -> SurvivalData {
        SurvivalData {
            schema: self.schema.clone(),
            records: self.subjects(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), PedError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = vec![
            "id", "interval", "t_start", "t_end", "t_rep", "exposure", "offset", "delta",
        ];
        header.extend(self.schema.covariates.iter().map(String::as_str));
        header.push("group");
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.id.clone(),
                r.interval.to_string(),
                g17(r.t_start),
                g17(r.t_end),
                g17(r.t_rep),
                g17(r.exposure),
                g17(r.offset),
                r.delta.to_string(),
            ];
            rec.extend(r.covariates.iter().map(|&v| g17(v)));
            rec.push(r.group.clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV layout produced by [`PedDataset::write_csv`]. Group
    /// levels are taken in order of first appearance unless `group_levels`
    /// is given; the time convention is inferred from the `t_rep` column.
    pub fn read_csv<R: Read>(reader: R, group_levels: Option<&[String]>) -> Result<Self, PedError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        let fixed = [
            "id", "interval", "t_start", "t_end", "t_rep", "exposure", "offset", "delta",
        ];
        if header.len() < fixed.len() + 1
            || header.iter().take(fixed.len()).ne(fixed.iter().copied())
            || &header[header.len() - 1] != "group"
        {
            return Err(PedError::Format("unexpected header".into()));
        }
        let covariates: Vec<String> = header
            .iter()
            .skip(fixed.len())
            .take(header.len() - fixed.len() - 1)
            .map(String::from)
            .collect();
        let mut rows = Vec::new();
        let mut levels: Vec<String> = group_levels.map(<[String]>::to_vec).unwrap_or_default();
        let num = |s: &str, what: &str| -> Result<f64, PedError> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| PedError::Format(format!("bad {what} value {s:?}")))
        };
        for rec in rdr.records() {
            let rec = rec?;
            let interval: usize = rec[1]
                .trim()
                .parse()
                .map_err(|_| PedError::Format(format!("bad interval {:?}", &rec[1])))?;
            let delta: u8 = match rec[7].trim() {
                "0" => 0,
                "1" => 1,
                other => return Err(PedError::Format(format!("bad delta {other:?}"))),
            };
            let covs = (0..covariates.len())
                .map(|c| num(&rec[fixed.len() + c], &covariates[c]))
                .collect::<Result<Vec<_>, _>>()?;
            let group = rec[rec.len() - 1].to_string();
            if !levels.contains(&group) {
                if group_levels.is_some() {
                    return Err(PedError::UnknownGroup {
                        id: rec[0].to_string(),
                        label: group,
                    });
                }
                levels.push(group.clone());
            }
            rows.push(PedRow {
                id: rec[0].to_string(),
                interval,
                t_start: num(&rec[2], "t_start")?,
                t_end: num(&rec[3], "t_end")?,
                t_rep: num(&rec[4], "t_rep")?,
                exposure: num(&rec[5], "exposure")?,
                offset: num(&rec[6], "offset")?,
                delta,
                covariates: covs,
                group,
            });
        }
        if rows.is_empty() {
            return Err(PedError::EmptyDataset);
        }
        let mut kappas = vec![0.0; rows.iter().map(|r| r.interval).max().unwrap_or(0) + 1];
        let mut seen = vec![false; kappas.len()];
        for r in &rows {
            if r.interval == 0 {
                return Err(PedError::Format("interval index must be 1-based".into()));
            }
            kappas[r.interval] = r.t_end;
            kappas[r.interval - 1] = r.t_start;
            seen[r.interval] = true;
        }
        if seen.iter().skip(1).any(|s| !s) {
            return Err(PedError::Format("interval sequence has gaps".into()));
        }
        let cuts = CutPoints::new(kappas)?;
        let convention = if rows.iter().all(|r| r.t_rep == r.t_end) {
            TimeConvention::End
        } else if rows.iter().all(|r| r.t_rep == 0.5 * (r.t_start + r.t_end)) {
            TimeConvention::Mid
        } else {
            return Err(PedError::Format(
                "t_rep follows neither the end nor the mid convention".into(),
            ));
        };
        let schema = Schema {
            covariates,
            group_name: "group".into(),
            group_levels: levels,
        };
        Ok(Self {
            rows,
            cuts,
            schema,
            convention,
        })
    }
}
