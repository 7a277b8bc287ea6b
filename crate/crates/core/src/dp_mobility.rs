//! Differentially-private aggregation of trip records into weekly
//! origin→destination flow counts.
//!
//! Each weekly (origin, destination) metric is the number of distinct users
//! who made that trip. Publishing adds zero-mean Laplace noise of scale
//! `1/epsilon` to every metric and suppresses those whose noisy value falls
//! below the threshold. Metrics are privatized independently; no composition
//! accounting is done across metrics or releases.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_ingest::Warnings;
use crate::days::Fips;
use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripRecord {
    pub user_id: String,
    pub week: u32,
    pub origin: Fips,
    pub dest: Fips,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub week: u32,
    pub origin: Fips,
    pub dest: Fips,
    /// Distinct-user count; integral when raw, noisy real when privatized.
    pub count: f64,
    pub privatized: bool,
}

/// Weekly flows sorted by (week, origin, dest).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowTable {
    pub privatized: bool,
    pub records: Vec<FlowRecord>,
}

impl FlowTable {
    pub fn new(privatized: bool, mut records: Vec<FlowRecord>) -> Result<Self> {
        if let Some(r) = records.iter().find(|r| r.privatized != privatized) {
            return Err(Error::Validation(format!(
                "mixed raw and privatized flow records (week {}, {} -> {})",
                r.week, r.origin, r.dest
            )));
        }
        if let Some(r) = records.iter().find(|r| !r.count.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite flow count (week {}, {} -> {})",
                r.week, r.origin, r.dest
            )));
        }
        records.sort_by_key(|r| (r.week, r.origin, r.dest));
        if let Some(w) = records
            .windows(2)
            .find(|w| (w[0].week, w[0].origin, w[0].dest) == (w[1].week, w[1].origin, w[1].dest))
        {
            return Err(Error::Validation(format!(
                "duplicate flow (week {}, {} -> {})",
                w[0].week, w[0].origin, w[0].dest
            )));
        }
        Ok(FlowTable {
            privatized,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn weeks(&self) -> BTreeSet<u32> {
        self.records.iter().map(|r| r.week).collect()
    }

    /// Records of one week (empty when the week has no data).
    pub fn week(&self, week: u32) -> &[FlowRecord] {
        let lo = self.records.partition_point(|r| r.week < week);
        let hi = self.records.partition_point(|r| r.week <= week);
        &self.records[lo..hi]
    }

    /// The week whose flows stand in for `week`: itself when present, else the
    /// nearest earlier week with data, else the nearest later one.
    pub fn resolve_week(&self, week: u32) -> Option<u32> {
        let weeks = self.weeks();
        if weeks.contains(&week) {
            return Some(week);
        }
        weeks
            .range(..week)
            .next_back()
            .or_else(|| weeks.range(week..).next())
            .copied()
    }
}

/// Laplace mechanism parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
    pub noise_scale: f64,
    pub threshold: f64,
}

impl Default for PrivacyParams {
    fn default() -> Self {
        PrivacyParams {
            epsilon: 0.66,
            delta: 2.1e-29,
            noise_scale: 1.0 / 0.66,
            threshold: 100.0,
        }
    }
}

impl PrivacyParams {
    pub fn new(epsilon: f64, threshold: f64) -> Result<Self> {
        let p = PrivacyParams {
            epsilon,
            noise_scale: 1.0 / epsilon,
            threshold,
            ..Default::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("epsilon", self.epsilon),
            ("delta", self.delta),
            ("noise_scale", self.noise_scale),
            ("threshold", self.threshold),
        ];
        if let Some((name, v)) = fields.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!(
                "privacy parameter {name} = {v} must be positive"
            )));
        }
        if ((self.noise_scale * self.epsilon) - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "noise scale {} is not 1/epsilon for epsilon {}",
                self.noise_scale, self.epsilon
            )));
        }
        Ok(())
    }
}

/// Seeded zero-mean Laplace sampler (inverse CDF of a uniform draw).
#[derive(Debug, Clone)]
pub struct LaplaceSampler {
    scale: f64,
    rng: ChaCha8Rng,
}

impl LaplaceSampler {
    pub fn new(scale: f64, seed: u64) -> Self {
        LaplaceSampler {
            scale,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample(&mut self) -> f64 {
        // r = 0 maps to ln(0); redraw it
        let r = loop {
            let r: f64 = self.rng.random();
            if r > 0.0 {
                break r;
            }
        };
        let u = r - 0.5;
        -self.scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
    }
}

type FlowKey = (u32, Fips, Fips);

/// Counts distinct users per (week, origin, destination).
pub fn aggregate_weekly(trips: &[TripRecord]) -> FlowTable {
    aggregate_weekly_with(trips, Execution::default())
}

pub fn aggregate_weekly_with(trips: &[TripRecord], exec: Execution) -> FlowTable {
    fn empty<'a>() -> HashMap<FlowKey, HashSet<&'a str>> {
        HashMap::new()
    }
    let users = exec.fold_chunks(
        trips,
        empty,
        |mut acc, t| {
            acc.entry((t.week, t.origin, t.dest))
                .or_default()
                .insert(t.user_id.as_str());
            acc
        },
        |mut a, b| {
            for (k, set) in b {
                a.entry(k).or_default().extend(set);
            }
            a
        },
    );
    let sorted: BTreeMap<FlowKey, usize> = users.into_iter().map(|(k, s)| (k, s.len())).collect();
    FlowTable {
        privatized: false,
        records: sorted
            .into_iter()
            .map(|((week, origin, dest), n)| FlowRecord {
                week,
                origin,
                dest,
                count: n as f64,
                privatized: false,
            })
            .collect(),
    }
}

/// Adds Laplace noise to every raw count and drops noisy counts below the
/// threshold. Noise is drawn in record order from one stream seeded by `seed`.
pub fn privatize(raw: &FlowTable, params: &PrivacyParams, seed: u64) -> Result<FlowTable> {
    params.validate()?;
    let mut sampler = LaplaceSampler::new(params.noise_scale, seed);
    privatize_with_noise(raw, params, || sampler.sample())
}

/// [`privatize`] with an explicit noise source.
pub fn privatize_with_noise(
    raw: &FlowTable,
    params: &PrivacyParams,
    mut noise: impl FnMut() -> f64,
) -> Result<FlowTable> {
    if raw.privatized || raw.records.iter().any(|r| r.privatized) {
        return Err(Error::Usage("flow table is already privatized".into()));
    }
    let records = raw
        .records
        .iter()
        .filter_map(|r| {
            let count = r.count + noise();
            (count >= params.threshold).then(|| FlowRecord {
                count,
                privatized: true,
                ..r.clone()
            })
        })
        .collect();
    Ok(FlowTable {
        privatized: true,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub epsilon: f64,
    pub delta: f64,
    pub noise_scale: f64,
    pub threshold: f64,
    /// Number of published metrics, each carrying the per-metric guarantee.
    pub n_metrics: usize,
}

pub fn privacy_report(params: &PrivacyParams, n_metrics: usize) -> PrivacyReport {
    PrivacyReport {
        epsilon: params.epsilon,
        delta: params.delta,
        noise_scale: params.noise_scale,
        threshold: params.threshold,
        n_metrics,
    }
}

pub fn parse_trips<R: Read>(input: R) -> Result<Vec<TripRecord>> {
    use crate::data_ingest::{check_header, csv_error, csv_line};
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    check_header(
        reader.headers().map_err(|e| csv_error(e, 1))?,
        &["user_id", "week", "origin_fips", "dest_fips"],
    )?;
    let mut trips = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let fallback = i as u64 + 2;
        let row = row.map_err(|e| csv_error(e, fallback))?;
        let line = csv_line(&row, fallback);
        let bad = |message: String| Error::Parse { line, message };
        if row.len() != 4 || row[0].is_empty() {
            return Err(bad("expected user_id,week,origin_fips,dest_fips".into()));
        }
        trips.push(TripRecord {
            user_id: row[0].to_string(),
            week: row[1]
                .parse()
                .map_err(|e| bad(format!("week {:?}: {e}", &row[1])))?,
            origin: row[2].parse().map_err(|e: Error| bad(e.to_string()))?,
            dest: row[3].parse().map_err(|e: Error| bad(e.to_string()))?,
        });
    }
    Ok(trips)
}

pub fn write_trips<W: Write>(out: W, trips: impl IntoIterator<Item = TripRecord>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["user_id", "week", "origin_fips", "dest_fips"])?;
    for t in trips {
        w.write_record([
            t.user_id,
            t.week.to_string(),
            t.origin.to_string(),
            t.dest.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Parses a flows CSV (`week,origin_fips,dest_fips,count`). Negative counts
/// are rejected; raw tables additionally require integral counts.
pub fn parse_flows<R: Read>(input: R, privatized: bool) -> Result<(FlowTable, Warnings)> {
    use crate::data_ingest::{check_header, csv_error, csv_line};
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    check_header(
        reader.headers().map_err(|e| csv_error(e, 1))?,
        &["week", "origin_fips", "dest_fips", "count"],
    )?;
    let mut records = Vec::new();
    let mut warnings = Warnings::new();
    for (i, row) in reader.records().enumerate() {
        let fallback = i as u64 + 2;
        let row = row.map_err(|e| csv_error(e, fallback))?;
        let line = csv_line(&row, fallback);
        let bad = |message: String| Error::Parse { line, message };
        if row.len() != 4 {
            return Err(bad("expected week,origin_fips,dest_fips,count".into()));
        }
        let count: f64 = row[3]
            .parse()
            .map_err(|e| bad(format!("count {:?}: {e}", &row[3])))?;
        if !count.is_finite() || count < 0.0 {
            return Err(bad(format!(
                "count {count} must be finite and non-negative"
            )));
        }
        if !privatized && count.fract() != 0.0 {
            return Err(bad(format!("raw count {count} is not integral")));
        }
        if privatized && count < PrivacyParams::default().threshold {
            warnings.push(format!("line {line}: published count {count} below 100"));
        }
        records.push(FlowRecord {
            week: row[0]
                .parse()
                .map_err(|e| bad(format!("week {:?}: {e}", &row[0])))?,
            origin: row[1].parse().map_err(|e: Error| bad(e.to_string()))?,
            dest: row[2].parse().map_err(|e: Error| bad(e.to_string()))?,
            count,
            privatized,
        });
    }
    Ok((FlowTable::new(privatized, records)?, warnings))
}

pub fn write_flows<W: Write>(out: W, table: &FlowTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["week", "origin_fips", "dest_fips", "count"])?;
    for r in &table.records {
        w.write_record([
            r.week.to_string(),
            r.origin.to_string(),
            r.dest.to_string(),
            r.count.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}
