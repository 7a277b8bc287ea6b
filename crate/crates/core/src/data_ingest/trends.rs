use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{check_header, csv_error, csv_line, Warnings};
use crate::days::{date_of, day_index, parse_date, Fips};
use crate::error::{Error, Result};

/// Trend categories in column (and feature) order.
pub const TREND_CATEGORIES: [&str; 6] = [
    "retail",
    "grocery",
    "parks",
    "transit",
    "workplaces",
    "residential",
];

/// Relative change in visits per category against a pre-epidemic baseline.
/// Zero is normal; -0.25 is a 25% reduction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MobilityTrends {
    pub values: BTreeMap<Fips, BTreeMap<u32, [f64; 6]>>,
}

impl MobilityTrends {
    /// Trend values for a county and day; missing entries read as baseline (0).
    pub fn get(&self, fips: Fips, day: u32) -> [f64; 6] {
        self.values
            .get(&fips)
            .and_then(|days| days.get(&day))
            .copied()
            .unwrap_or([0.0; 6])
    }

    pub fn insert(&mut self, fips: Fips, day: u32, values: [f64; 6]) -> Result<()> {
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < -1.0) {
            return Err(Error::Validation(format!(
                "trend value {v} for {fips} on day {day} outside [-1, inf)"
            )));
        }
        self.values.entry(fips).or_default().insert(day, values);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parses a trends CSV with header
/// `date,fips,retail,grocery,parks,transit,workplaces,residential`.
/// Empty cells are imputed as 0 with a warning.
pub fn parse_trends<R: Read>(input: R) -> Result<(MobilityTrends, Warnings)> {
    let mut header = vec!["date", "fips"];
    header.extend(TREND_CATEGORIES);
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    check_header(reader.headers().map_err(|e| csv_error(e, 1))?, &header)?;

    let mut trends = MobilityTrends::default();
    let mut warnings = Warnings::new();
    for (i, row) in reader.records().enumerate() {
        let fallback = i as u64 + 2;
        let row = row.map_err(|e| csv_error(e, fallback))?;
        let line = csv_line(&row, fallback);
        let bad = |message: String| Error::Parse { line, message };
        if row.len() != header.len() {
            return Err(bad(format!(
                "expected {} fields, found {}",
                header.len(),
                row.len()
            )));
        }
        let day = parse_date(&row[0])
            .and_then(day_index)
            .map_err(|e| bad(e.to_string()))?;
        let fips: Fips = row[1].parse().map_err(|e: Error| bad(e.to_string()))?;
        let mut values = [0.0; 6];
        for (k, v) in values.iter_mut().enumerate() {
            let cell = &row[k + 2];
            if cell.is_empty() {
                warnings.push(format!(
                    "line {line}: empty {} imputed as 0",
                    TREND_CATEGORIES[k]
                ));
                continue;
            }
            *v = cell
                .parse()
                .map_err(|e| bad(format!("{} {cell:?}: {e}", TREND_CATEGORIES[k])))?;
        }
        if trends
            .values
            .get(&fips)
            .is_some_and(|d| d.contains_key(&day))
        {
            return Err(bad(format!("duplicate trend row for {fips} on day {day}")));
        }
        trends
            .insert(fips, day, values)
            .map_err(|e| bad(e.to_string()))?;
    }
    Ok((trends, warnings))
}

/// Writes trends in the CSV layout read by [`parse_trends`], ordered by date then fips.
pub fn write_trends<W: Write>(out: W, trends: &MobilityTrends) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["date", "fips"];
    header.extend(TREND_CATEGORIES);
    w.write_record(&header)?;
    let mut rows: Vec<(u32, Fips, &[f64; 6])> = trends
        .values
        .iter()
        .flat_map(|(f, days)| days.iter().map(move |(d, v)| (*d, *f, v)))
        .collect();
    rows.sort_by_key(|r| (r.0, r.1));
    for (day, fips, values) in rows {
        let mut rec = vec![date_of(day).to_string(), fips.to_string()];
        rec.extend(values.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}
