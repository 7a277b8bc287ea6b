use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{check_header, csv_error, csv_line, Warnings};
use crate::days::{date_of, day_index, day_zero, parse_date, Fips};
use crate::error::{Error, Result};

const HEADER: [&str; 6] = ["date", "county", "state", "fips", "cases", "deaths"];

/// One row of a cases file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub date: NaiveDate,
    pub fips: Fips,
    pub state_id: u32,
    pub county_id: u32,
    pub cum_cases: u64,
    pub cum_deaths: u64,
}

/// Daily differences of a county's cumulative series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub cases: Vec<i64>,
    pub deaths: Vec<i64>,
    /// Days whose case or death delta is negative (a reporting correction).
    pub corrected: Vec<bool>,
}

/// Gap-filled cumulative series of one county, starting at its first
/// reported day and running to the table's last day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountySeries {
    pub fips: Fips,
    pub county: String,
    pub state: String,
    pub first_day: u32,
    pub cum_cases: Vec<u64>,
    pub cum_deaths: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas: Option<Deltas>,
}

impl CountySeries {
    pub fn last_day(&self) -> u32 {
        self.first_day + self.cum_cases.len() as u32 - 1
    }

    /// Cumulative cases at `day`; zero before the first report, `None` past
    /// the end of the table.
    pub fn cum_cases_at(&self, day: u32) -> Option<u64> {
        Self::at(&self.cum_cases, self.first_day, day)
    }

    pub fn cum_deaths_at(&self, day: u32) -> Option<u64> {
        Self::at(&self.cum_deaths, self.first_day, day)
    }

    /// Signed case delta at `day` (zero before the first report).
    pub fn delta_cases_at(&self, day: u32) -> Option<i64> {
        Self::delta(&self.cum_cases, self.first_day, day)
    }

    pub fn delta_deaths_at(&self, day: u32) -> Option<i64> {
        Self::delta(&self.cum_deaths, self.first_day, day)
    }

    fn at(series: &[u64], first: u32, day: u32) -> Option<u64> {
        if day < first {
            return Some(0);
        }
        series.get((day - first) as usize).copied()
    }

    fn delta(series: &[u64], first: u32, day: u32) -> Option<i64> {
        let now = Self::at(series, first, day)? as i64;
        let before = if day == 0 {
            0
        } else {
            Self::at(series, first, day - 1)? as i64
        };
        Some(now - before)
    }
}

/// Per-county daily cumulative cases and deaths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseTable {
    pub day_zero: NaiveDate,
    /// Last day index present in any county; every series is filled to it.
    pub last_day: Option<u32>,
    pub counties: BTreeMap<Fips, CountySeries>,
    /// Optional county populations, used to rank counties for evaluation.
    #[serde(default)]
    pub populations: BTreeMap<Fips, u64>,
}

impl Default for CaseTable {
    fn default() -> Self {
        CaseTable {
            day_zero: day_zero(),
            last_day: None,
            counties: BTreeMap::new(),
            populations: BTreeMap::new(),
        }
    }
}

impl CaseTable {
    pub fn is_empty(&self) -> bool {
        self.counties.is_empty()
    }

    pub fn len(&self) -> usize {
        self.counties.len()
    }

    pub fn get(&self, fips: Fips) -> Option<&CountySeries> {
        self.counties.get(&fips)
    }

    pub fn series(&self, fips: Fips) -> Result<&CountySeries> {
        self.get(fips)
            .ok_or_else(|| Error::Validation(format!("county {fips} not in case table")))
    }

    pub fn fips(&self) -> Vec<Fips> {
        self.counties.keys().copied().collect()
    }

    pub fn cum_cases(&self, fips: Fips, day: u32) -> Result<u64> {
        self.series(fips)?
            .cum_cases_at(day)
            .ok_or_else(|| Error::Range(format!("day {day} beyond case data for {fips}")))
    }

    pub fn delta_cases(&self, fips: Fips, day: u32) -> Result<i64> {
        self.series(fips)?
            .delta_cases_at(day)
            .ok_or_else(|| Error::Range(format!("day {day} beyond case data for {fips}")))
    }

    /// Builds a gap-filled table from individual records.
    pub fn from_records(records: Vec<(CaseRecord, String, String)>) -> Result<(Self, Warnings)> {
        type Rows = BTreeMap<u32, (u64, u64)>;
        let mut by_county: BTreeMap<Fips, (String, String, Rows)> = BTreeMap::new();
        for (rec, county, state) in records {
            let day = day_index(rec.date)?;
            let entry = by_county
                .entry(rec.fips)
                .or_insert_with(|| (county, state, BTreeMap::new()));
            match entry.2.entry(day) {
                Entry::Vacant(v) => {
                    v.insert((rec.cum_cases, rec.cum_deaths));
                }
                Entry::Occupied(_) => {
                    return Err(Error::Validation(format!(
                        "duplicate row for county {} on {}",
                        rec.fips, rec.date
                    )))
                }
            }
        }

        let last_day = by_county
            .values()
            .filter_map(|(_, _, days)| days.keys().next_back().copied())
            .max();
        let mut warnings = Warnings::new();
        let mut counties = BTreeMap::new();
        for (fips, (county, state, days)) in by_county {
            let first_day = *days.keys().next().expect("county has a row");
            let last = last_day.expect("non-empty");
            let mut cum_cases = Vec::with_capacity((last - first_day + 1) as usize);
            let mut cum_deaths = Vec::with_capacity(cum_cases.capacity());
            let mut current = (0, 0);
            for day in first_day..=last {
                if let Some(&(c, d)) = days.get(&day) {
                    if c < current.0 || d < current.1 {
                        warnings.push(format!(
                            "county {fips}: cumulative counts decrease on day {day} ({} -> {c} cases, {} -> {d} deaths)",
                            current.0, current.1
                        ));
                    }
                    current = (c, d);
                }
                cum_cases.push(current.0);
                cum_deaths.push(current.1);
            }
            counties.insert(
                fips,
                CountySeries {
                    fips,
                    county,
                    state,
                    first_day,
                    cum_cases,
                    cum_deaths,
                    deltas: None,
                },
            );
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok((
            CaseTable {
                day_zero: day_zero(),
                last_day,
                counties,
                populations: BTreeMap::new(),
            },
            warnings,
        ))
    }
}

/// Parses a cases CSV with header `date,county,state,fips,cases,deaths`.
///
/// Days missing inside a county's series, and days after its last row up to
/// the table's last day, are forward-filled with the last cumulative values.
/// Rows without a county code are skipped with a warning.
pub fn parse_cases<R: Read>(input: R) -> Result<(CaseTable, Warnings)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    check_header(reader.headers().map_err(|e| csv_error(e, 1))?, &HEADER)?;

    let mut records = Vec::new();
    let mut skipped = Warnings::new();
    for (i, row) in reader.records().enumerate() {
        let fallback = i as u64 + 2;
        let row = row.map_err(|e| csv_error(e, fallback))?;
        let line = csv_line(&row, fallback);
        let bad = |message: String| Error::Parse { line, message };
        if row.len() != HEADER.len() {
            return Err(bad(format!(
                "expected {} fields, found {}",
                HEADER.len(),
                row.len()
            )));
        }
        if row[3].is_empty() {
            skipped.push(format!(
                "line {line}: no county code for {:?}, row skipped",
                &row[1]
            ));
            continue;
        }
        let date = parse_date(&row[0]).map_err(|e| bad(e.to_string()))?;
        let fips: Fips = row[3].parse().map_err(|e: Error| bad(e.to_string()))?;
        let count = |field: &str, name: &str| {
            field
                .parse::<u64>()
                .map_err(|e| bad(format!("{name} {field:?}: {e}")))
        };
        let record = CaseRecord {
            date,
            fips,
            state_id: fips.state(),
            county_id: fips.county(),
            cum_cases: count(&row[4], "cases")?,
            cum_deaths: count(&row[5], "deaths")?,
        };
        if date < day_zero() {
            return Err(bad(format!("date {date} precedes 2020-01-01")));
        }
        records.push((record, row[1].to_string(), row[2].to_string()));
    }
    let (table, mut warnings) = CaseTable::from_records(records)?;
    skipped.append(&mut warnings);
    Ok((table, skipped))
}

/// Writes a table in the cases CSV layout, one row per county and day from
/// its first reported day, ordered by date then fips.
pub fn write_cases<W: Write>(out: W, table: &CaseTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    let Some(last) = table.last_day else {
        return w.flush().map_err(|e| Error::io("<csv>", e));
    };
    let first = table
        .counties
        .values()
        .map(|s| s.first_day)
        .min()
        .unwrap_or(last);
    for day in first..=last {
        let date = date_of(day).to_string();
        for s in table.counties.values() {
            let (Some(c), Some(d)) = (s.cum_cases_at(day), s.cum_deaths_at(day)) else {
                continue;
            };
            if day < s.first_day {
                continue;
            }
            w.write_record([
                date.as_str(),
                &s.county,
                &s.state,
                &s.fips.to_string(),
                &c.to_string(),
                &d.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Parses a `fips,population` CSV.
pub fn parse_populations<R: Read>(input: R) -> Result<BTreeMap<Fips, u64>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    check_header(
        reader.headers().map_err(|e| csv_error(e, 1))?,
        &["fips", "population"],
    )?;
    let mut out = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let fallback = i as u64 + 2;
        let row = row.map_err(|e| csv_error(e, fallback))?;
        let line = csv_line(&row, fallback);
        let bad = |message: String| Error::Parse { line, message };
        if row.len() != 2 {
            return Err(bad("expected fips,population".into()));
        }
        let fips: Fips = row[0].parse().map_err(|e: Error| bad(e.to_string()))?;
        let pop = row[1]
            .parse()
            .map_err(|e| bad(format!("population {:?}: {e}", &row[1])))?;
        if out.insert(fips, pop).is_some() {
            return Err(bad(format!("duplicate population for {fips}")));
        }
    }
    Ok(out)
}

pub fn write_populations<W: Write>(out: W, populations: &BTreeMap<Fips, u64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["fips", "population"])?;
    for (f, p) in populations {
        w.write_record([f.to_string(), p.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Populates per-county deltas: `delta[t] = cum[t] - cum[t-1]`, with the first
/// observed day's delta equal to its cumulative value. Negative deltas are
/// kept and flagged in [`Deltas::corrected`].
pub fn compute_deltas(mut table: CaseTable) -> CaseTable {
    for series in table.counties.values_mut() {
        let diff = |cum: &[u64]| -> Vec<i64> {
            let mut prev = 0i64;
            cum.iter()
                .map(|&c| {
                    let d = c as i64 - prev;
                    prev = c as i64;
                    d
                })
                .collect()
        };
        let cases = diff(&series.cum_cases);
        let deaths = diff(&series.cum_deaths);
        let corrected = cases
            .iter()
            .zip(&deaths)
            .map(|(&c, &d)| c < 0 || d < 0)
            .collect();
        series.deltas = Some(Deltas {
            cases,
            deaths,
            corrected,
        });
    }
    table
}
