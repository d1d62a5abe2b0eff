//! Anonymized per-zone condition counts with small-zone withdrawal.
//!
//! Each coded encounter is counted once, under its primary (first)
//! diagnosis code, in the zone its patient is registered to. Encounters
//! without codes (observations, free-text notes) are not counted.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Encounter, Millis, ZoneId};
use crate::view::View;

pub const DEFAULT_K: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalyticsError {
    #[error("INVALID_PERIOD: {0:?} is not YYYY-MM")]
    InvalidPeriod(String),
    #[error("INVALID_K: k must be at least 1")]
    InvalidK,
    #[error("UNSUPPRESSED_INPUT: zone {zone_id} / {condition_code} is below k")]
    UnsuppressedInput {
        zone_id: ZoneId,
        condition_code: String,
    },
}

impl AnalyticsError {
    pub fn code(&self) -> &'static str {
        match self {
            AnalyticsError::InvalidPeriod(_) => "INVALID_PERIOD",
            AnalyticsError::InvalidK => "INVALID_K",
            AnalyticsError::UnsuppressedInput { .. } => "UNSUPPRESSED_INPUT",
        }
    }
}

/// A calendar month in UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Period {
    pub year: i32,
    pub month: u32,
}

impl Period {
    pub fn of(ms: Millis) -> Option<Period> {
        let dt = DateTime::from_timestamp_millis(i64::try_from(ms).ok()?)?;
        Some(Period {
            year: dt.year(),
            month: dt.month(),
        })
    }

    pub fn contains(&self, ms: Millis) -> bool {
        Period::of(ms) == Some(*self)
    }
}

impl FromStr for Period {
    type Err = AnalyticsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AnalyticsError::InvalidPeriod(s.to_owned());
        let (y, m) = s.split_once('-').ok_or_else(bad)?;
        if y.len() != 4 || m.len() != 2 || !y.bytes().chain(m.bytes()).all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let year: i32 = y.parse().map_err(|_| bad())?;
        let month: u32 = m.parse().map_err(|_| bad())?;
        if !(1..=12).contains(&month) {
            return Err(bad());
        }
        Ok(Period { year, month })
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl Serialize for Period {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Period {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One exported cell. Exactly these four members are serialized.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneAggregate {
    pub zone_id: ZoneId,
    pub period: Period,
    pub condition_code: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateExport {
    pub period: Period,
    pub k: u32,
    pub rows: Vec<ZoneAggregate>,
}

fn counted<'a>(view: &'a View, e: &'a Encounter, period: Period) -> Option<(&'a ZoneId, &'a str)> {
    if !period.contains(e.occurred_at) {
        return None;
    }
    let code = e.diagnosis_codes.first()?;
    let patient = view.patient(&e.patient_id)?;
    Some((&patient.zone_id, code.as_str()))
}

/// Number of encounters in `period` that contribute to the aggregates.
pub fn countable_encounters(view: &View, period: Period) -> u64 {
    view.encounters()
        .filter(|e| counted(view, e, period).is_some())
        .count() as u64
}

/// One row per (zone, condition) with a positive count, sorted by zone then
/// condition.
pub fn build_aggregates(view: &View, period: Period) -> Vec<ZoneAggregate> {
    let mut counts: BTreeMap<(ZoneId, String), u64> = BTreeMap::new();
    for e in view.encounters() {
        if let Some((zone, code)) = counted(view, e, period) {
            *counts.entry((zone.clone(), code.to_owned())).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|((zone_id, condition_code), count)| ZoneAggregate {
            zone_id,
            period,
            condition_code,
            count,
        })
        .collect()
}

fn passes(view: &View, row: &ZoneAggregate, k: u32) -> bool {
    let k = u64::from(k);
    view.patient_count_in_zone(&row.zone_id) as u64 >= k && row.count >= k
}

/// Withdraw rows from zones with fewer than `k` registered patients and
/// rows whose own count is below `k`.
pub fn suppress_small_zones(
    rows: Vec<ZoneAggregate>,
    view: &View,
    k: u32,
) -> Result<Vec<ZoneAggregate>, AnalyticsError> {
    if k == 0 {
        return Err(AnalyticsError::InvalidK);
    }
    Ok(rows.into_iter().filter(|r| passes(view, r, k)).collect())
}

/// Wrap suppressed rows in the export document, re-checking the threshold.
pub fn export_anonymized(
    rows: Vec<ZoneAggregate>,
    view: &View,
    period: Period,
    k: u32,
) -> Result<AggregateExport, AnalyticsError> {
    if k == 0 {
        return Err(AnalyticsError::InvalidK);
    }
    if let Some(bad) = rows.iter().find(|r| !passes(view, r, k) || r.period != period) {
        return Err(AnalyticsError::UnsuppressedInput {
            zone_id: bad.zone_id.clone(),
            condition_code: bad.condition_code.clone(),
        });
    }
    Ok(AggregateExport { period, k, rows })
}

/// Build, suppress and export in one step.
pub fn aggregate_report(view: &View, period: Period, k: u32) -> Result<AggregateExport, AnalyticsError> {
    let rows = suppress_small_zones(build_aggregates(view, period), view, k)?;
    export_anonymized(rows, view, period, k)
}
